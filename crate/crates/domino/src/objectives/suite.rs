//! Finite-difference checks for every edge loss, driven through the real
//! encoder (plus head/decoder/probe where the edge needs one) at miniature
//! scale. Model parameters and input images are all probed, except parameters
//! the edge provably cannot influence (see [`degenerate_params`]): a central
//! difference of a constant measures pure roundoff, which the relative-error
//! floor amplifies past any useful tolerance. A companion test pins the
//! analytic gradient of every excluded parameter to zero instead.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::edges::{edge_loss, ModalityBatch, ProjectionCache};
use super::graph::Edge;
use super::infonce::CriticConfig;
use crate::model::{
    encode, init_decoder, init_encoder, init_head, init_probe, Binding, EncoderConfig, ForwardCtx,
    ParamStore,
};
use crate::ndgrad::{Array, BatchNormMode, NamedCheck, NdError, Tape, ValueRef};

const BATCH: usize = 3;
const CLASSES: usize = 4;

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig { in_channels: 1, base_channels: 4, latent_dim: 8 }
}

fn tiny_critic() -> CriticConfig {
    CriticConfig::with_d(tiny_cfg().latent_dim)
}

/// Parameters whose gradient is identically zero under `edge`, by
/// construction of the model:
///
/// * the projection head ends in a batchnorm whose mean subtraction absorbs
///   the per-channel shift contributed by `a2/b`;
/// * location-only edges (XX's local side, both sides of CC) never evaluate
///   the encoder's global stage (`conv3`/`bn3`/`fc`);
/// * soft CCA standardizes latent columns, which absorbs the `fc` bias.
fn degenerate_params(edge: &Edge) -> Vec<String> {
    let head_bias = |m: usize| format!("head{m}/a2/b");
    let global_stage = |m: usize| {
        ["conv3/w", "bn3/gamma", "bn3/beta", "fc/w", "fc/b"]
            .into_iter()
            .map(move |s| format!("enc{m}/{s}"))
    };
    match *edge {
        Edge::Cr(i) => vec![head_bias(i)],
        Edge::Xx(i, _) => std::iter::once(head_bias(i)).chain(global_stage(i)).collect(),
        Edge::Cc(i, j) => [i, j]
            .iter()
            .flat_map(|&m| std::iter::once(head_bias(m)).chain(global_stage(m)))
            .collect(),
        Edge::Cca(i, j) => vec![format!("enc{i}/fc/b"), format!("enc{j}/fc/b")],
        _ => Vec::new(),
    }
}

/// Parameters an `edge` needs, freshly initialized from `rng`.
fn edge_store(edge: &Edge, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let cfg = tiny_cfg();
    let mut store = ParamStore::new();
    for &m in &edge.modalities() {
        init_encoder(&mut store, rng, m, &cfg);
    }
    for &m in &edge.head_modalities() {
        init_head(&mut store, rng, m, &cfg, tiny_critic().d);
    }
    if let Edge::Ae(m) = *edge {
        init_decoder(&mut store, rng, m, &cfg);
    }
    if let Edge::Sup(m) = *edge {
        init_probe(&mut store, rng, m, cfg.latent_dim, CLASSES);
    }
    store
}

/// Encodes the touched modalities from image leaves and builds the edge loss.
/// `refs` lists the edge's parameters (matching `names`) followed by one
/// image batch per entry of `mods`.
fn edge_graph_loss(
    edge: &Edge,
    names: &[String],
    mods: &[usize],
    tape: &mut Tape<f64>,
    refs: &[ValueRef],
) -> Result<ValueRef, NdError> {
    let cfg = tiny_cfg();
    let critic = tiny_critic();
    let mut by_name = BTreeMap::new();
    for (name, &r) in names.iter().zip(refs) {
        by_name.insert(name.clone(), r);
    }
    let binding = Binding::from_refs(by_name);
    let mut ctx = ForwardCtx::new(tape, &binding, BatchNormMode::Train);
    let max_m = *mods.iter().max().expect("edge touches a modality");
    let mut batches = Vec::new();
    for m in 0..=max_m {
        if let Some(slot) = mods.iter().position(|&x| x == m) {
            let x = refs[names.len() + slot];
            let out = encode(&mut ctx, m, &cfg, x)?;
            batches.push(ModalityBatch { x: Some(x), out: Some(out) });
        } else {
            batches.push(ModalityBatch { x: None, out: None });
        }
    }
    let labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
    let cfgs = vec![cfg; max_m + 1];
    let mut cache = ProjectionCache::new(max_m + 1);
    edge_loss(&mut ctx, edge, &cfgs, &critic, &batches, Some(&labels), &mut cache)
}

/// One [`NamedCheck`] per edge kind. Leaves are the edge's parameters (in
/// sorted name order) followed by one image batch per touched modality.
pub fn edge_checks() -> Vec<NamedCheck> {
    let edges = [
        Edge::Cr(0),
        Edge::Xx(0, 1),
        Edge::Cc(0, 1),
        Edge::Rr(0, 1),
        Edge::Ae(0),
        Edge::Cca(0, 1),
        Edge::Sup(0),
    ];
    edges
        .into_iter()
        .map(|edge| {
            // The name order is a function of the edge alone, so the maker
            // and builder agree on leaf positions across seeds.
            let names: Vec<String> = {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                edge_store(&edge, &mut rng).param_names().cloned().collect()
            };
            let mods = edge.modalities();
            let dead = degenerate_params(&edge);
            let build_names = names.clone();
            let build_mods = mods.clone();
            NamedCheck::new(
                format!("edge/{edge}"),
                move |rng| {
                    let store = edge_store(&edge, rng);
                    let mut leaves: Vec<Array<f64>> = names
                        .iter()
                        .map(|n| {
                            let p = store.param(n).expect("listed name").clone();
                            if dead.contains(n) { p } else { p.with_grad() }
                        })
                        .collect();
                    for _ in &mods {
                        let n = BATCH * 32 * 32;
                        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                        leaves.push(
                            Array::new(vec![BATCH, 1, 32, 32], data).expect("static shape").with_grad(),
                        );
                    }
                    leaves
                },
                move |tape, refs| edge_graph_loss(&edge, &build_names, &build_mods, tape, refs),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::GradCheckOpts;

    #[test]
    fn every_edge_kind_has_a_check() {
        let names: Vec<String> = edge_checks().into_iter().map(|c| c.name).collect();
        for kind in ["CR", "XX", "CC", "RR", "AE", "CCA", "SUP"] {
            assert!(names.iter().any(|n| n.contains(kind)), "no check for {kind}: {names:?}");
        }
    }

    #[test]
    fn excluded_parameters_get_zero_analytic_gradient() {
        for edge in [Edge::Cr(0), Edge::Xx(0, 1), Edge::Cc(0, 1), Edge::Cca(0, 1)] {
            let dead = degenerate_params(&edge);
            assert!(!dead.is_empty(), "{edge} expected exclusions");
            let mods = edge.modalities();
            for seed in [0u64, 7] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let store = edge_store(&edge, &mut rng);
                let names: Vec<String> = store.param_names().cloned().collect();
                for d in &dead {
                    assert!(names.contains(d), "{edge}: {d} is not a model parameter");
                }
                let mut tape = Tape::new();
                let mut refs: Vec<ValueRef> = names
                    .iter()
                    .map(|n| tape.leaf(&store.param(n).unwrap().clone().with_grad()))
                    .collect();
                for _ in &mods {
                    let n = BATCH * 32 * 32;
                    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let x = Array::new(vec![BATCH, 1, 32, 32], data).unwrap().with_grad();
                    refs.push(tape.leaf(&x));
                }
                let root = edge_graph_loss(&edge, &names, &mods, &mut tape, &refs).unwrap();
                let grads = tape.backward(root).unwrap();
                for d in &dead {
                    let li = names.iter().position(|n| n == d).unwrap();
                    if let Some(g) = grads.get(refs[li]) {
                        let mx = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                        assert!(mx < 1e-10, "{edge} {d}: |grad| {mx}");
                    }
                }
            }
        }
    }

    #[test]
    fn rr_edge_passes_at_one_seed() {
        let checks = edge_checks();
        let rr = checks.iter().find(|c| c.name == "edge/RR:0-1").unwrap();
        let opts = GradCheckOpts { max_coords_per_leaf: 3, ..Default::default() };
        let report = rr.run([11], &opts).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.coords_checked > 0);
    }
}
