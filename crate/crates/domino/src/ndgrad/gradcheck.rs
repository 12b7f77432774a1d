//! Central finite-difference verification of tape gradients.
//!
//! All checks run in f64; f32 finite differences are too noisy to resolve the
//! tolerances used here.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{Tape, ValueRef};
use super::NdError;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates probed per leaf; 0 probes every coordinate.
    pub max_coords_per_leaf: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
    /// Also probe at ±eps/2 and skip coordinates where the two
    /// central-difference estimates disagree. A disagreement means a
    /// relu/leaky_relu kink sits inside the probe interval, where no finite
    /// difference measures the one-sided derivative the backward pass
    /// reports. Meant for whole-model checks; skipped coordinates are
    /// counted so a check that skips everything cannot silently pass.
    pub skip_nonsmooth: bool,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { eps: 1e-5, max_coords_per_leaf: 0, seed: 0, skip_nonsmooth: false }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic - fd| / (|analytic| + 1e-8).
    pub max_rel_err: f64,
    /// (leaf index, flat coordinate) attaining the max.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates dropped by the non-smoothness probe.
    pub skipped: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: 0, skipped: 0 }
    }

    fn fold(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.coords_checked += other.coords_checked;
        self.skipped += other.skipped;
    }
}

/// Check `build`'s gradients with respect to every `requires_grad` leaf.
///
/// `build` receives a fresh tape plus one [`ValueRef`] per leaf (in order) and
/// must return a scalar root. It is re-evaluated twice per probed coordinate.
pub fn grad_check(
    leaves: &[Array<f64>],
    opts: &GradCheckOpts,
    build: impl Fn(&mut Tape<f64>, &[ValueRef]) -> Result<ValueRef, NdError>,
) -> Result<GradCheckReport, NdError> {
    let eval = |work: &[Array<f64>]| -> Result<f64, NdError> {
        let mut tape = Tape::new();
        let refs: Vec<ValueRef> = work.iter().map(|a| tape.leaf(a)).collect();
        let root = build(&mut tape, &refs)?;
        if tape.shape(root) != [1] {
            return Err(NdError::RootNotScalar { shape: tape.shape(root).to_vec() });
        }
        Ok(tape.values(root)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let refs: Vec<ValueRef> = leaves.iter().map(|a| tape.leaf(a)).collect();
    let root = build(&mut tape, &refs)?;
    if tape.shape(root) != [1] {
        return Err(NdError::RootNotScalar { shape: tape.shape(root).to_vec() });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Option<Vec<f64>>> =
        refs.iter().map(|&r| grads.get(r).map(|g| g.to_vec())).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Array<f64>> = leaves.to_vec();
    let mut report = GradCheckReport::empty();

    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let numel = leaf.numel();
        let coords: Vec<usize> = if opts.max_coords_per_leaf == 0 || numel <= opts.max_coords_per_leaf {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, opts.max_coords_per_leaf).into_vec()
        };
        for coord in coords {
            let orig = work[li].data()[coord];
            work[li].data_mut()[coord] = orig + opts.eps;
            let f_plus = eval(&work)?;
            work[li].data_mut()[coord] = orig - opts.eps;
            let f_minus = eval(&work)?;
            let fd = (f_plus - f_minus) / (2.0 * opts.eps);

            if opts.skip_nonsmooth {
                let half = opts.eps / 2.0;
                work[li].data_mut()[coord] = orig + half;
                let h_plus = eval(&work)?;
                work[li].data_mut()[coord] = orig - half;
                let h_minus = eval(&work)?;
                let fd_half = (h_plus - h_minus) / (2.0 * half);
                if (fd - fd_half).abs() > 1e-9 + 1e-6 * fd.abs() {
                    work[li].data_mut()[coord] = orig;
                    report.skipped += 1;
                    continue;
                }
            }
            work[li].data_mut()[coord] = orig;

            let a = analytic[li].as_ref().map_or(0.0, |g| g[coord]);
            let rel = (a - fd).abs() / (a.abs() + 1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((li, coord));
            }
        }
    }
    Ok(report)
}

/// Run [`grad_check`] across several seeds, regenerating the leaves each
/// time, and fold the reports together.
pub fn grad_check_multi(
    seeds: impl IntoIterator<Item = u64>,
    opts: &GradCheckOpts,
    make_leaves: impl Fn(&mut ChaCha8Rng) -> Vec<Array<f64>>,
    build: impl Fn(&mut Tape<f64>, &[ValueRef]) -> Result<ValueRef, NdError>,
) -> Result<GradCheckReport, NdError> {
    let mut report = GradCheckReport::empty();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = make_leaves(&mut rng);
        let per = grad_check(&leaves, &GradCheckOpts { seed, ..opts.clone() }, &build)?;
        report.fold(&per);
    }
    Ok(report)
}

/// Fill a buffer with values bounded away from zero, so finite differences
/// never straddle a relu/leaky_relu kink or a log/sqrt domain edge.
pub fn sample_away_from_zero(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// A reusable, named gradient check: fresh leaves per seed plus the graph to
/// differentiate. Drives both `domino grad-check` and the acceptance suite.
pub struct NamedCheck {
    pub name: String,
    make_leaves: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Array<f64>> + Send + Sync>,
    build: Box<dyn Fn(&mut Tape<f64>, &[ValueRef]) -> Result<ValueRef, NdError> + Send + Sync>,
}

impl NamedCheck {
    pub fn new(
        name: impl Into<String>,
        make_leaves: impl Fn(&mut ChaCha8Rng) -> Vec<Array<f64>> + Send + Sync + 'static,
        build: impl Fn(&mut Tape<f64>, &[ValueRef]) -> Result<ValueRef, NdError> + Send + Sync + 'static,
    ) -> Self {
        NamedCheck { name: name.into(), make_leaves: Box::new(make_leaves), build: Box::new(build) }
    }

    pub fn run(
        &self,
        seeds: impl IntoIterator<Item = u64>,
        opts: &GradCheckOpts,
    ) -> Result<GradCheckReport, NdError> {
        grad_check_multi(seeds, opts, |rng| (self.make_leaves)(rng), |t, r| (self.build)(t, r))
    }
}

fn uni(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("static shape")
}

fn away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), sample_away_from_zero(rng, n, lo, hi)).expect("static shape")
}

/// Contract a non-scalar output against a fixed probe so every coordinate
/// feeds the root with a distinct weight.
fn probe_sum(tape: &mut Tape<f64>, y: ValueRef, probe: ValueRef) -> Result<ValueRef, NdError> {
    let weighted = tape.mul(y, probe)?;
    tape.sum(weighted)
}

/// One check per tape op. Leaves stay away from relu kinks and log/sqrt/div
/// domain edges so central differences see a smooth function.
pub fn op_checks() -> Vec<NamedCheck> {
    let mut v = Vec::new();

    v.push(NamedCheck::new(
        "op/matmul",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[4, 2], -1.0, 1.0).with_grad(), uni(rng, &[3, 2], -1.0, 1.0)],
        |t, r| {
            let y = t.matmul(r[0], r[1])?;
            probe_sum(t, y, r[2])
        },
    ));
    v.push(NamedCheck::new(
        "op/transpose",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[4, 3], -1.0, 1.0)],
        |t, r| {
            let y = t.transpose(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/conv2d",
        |rng| {
            vec![
                uni(rng, &[2, 2, 6, 6], -1.0, 1.0).with_grad(),
                uni(rng, &[3, 2, 3, 3], -1.0, 1.0).with_grad(),
                uni(rng, &[3], -0.5, 0.5).with_grad(),
                uni(rng, &[2, 3, 3, 3], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.conv2d(r[0], r[1], Some(r[2]), 2, 1)?;
            probe_sum(t, y, r[3])
        },
    ));
    v.push(NamedCheck::new(
        "op/conv_transpose2d",
        |rng| {
            vec![
                uni(rng, &[2, 3, 3, 3], -1.0, 1.0).with_grad(),
                uni(rng, &[3, 2, 4, 4], -1.0, 1.0).with_grad(),
                uni(rng, &[2], -0.5, 0.5).with_grad(),
                uni(rng, &[2, 2, 6, 6], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.conv_transpose2d(r[0], r[1], Some(r[2]), 2, 1)?;
            probe_sum(t, y, r[3])
        },
    ));
    v.push(NamedCheck::new(
        "op/batchnorm_train",
        |rng| {
            vec![
                uni(rng, &[4, 3, 2, 2], -1.0, 1.0).with_grad(),
                uni(rng, &[3], 0.5, 1.5).with_grad(),
                uni(rng, &[3], -0.5, 0.5).with_grad(),
                uni(rng, &[4, 3, 2, 2], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.batchnorm_train(r[0], r[1], r[2], 1e-5)?;
            probe_sum(t, y, r[3])
        },
    ));
    v.push(NamedCheck::new(
        "op/batchnorm_eval",
        |rng| {
            vec![
                uni(rng, &[4, 3, 2, 2], -1.0, 1.0).with_grad(),
                uni(rng, &[3], 0.5, 1.5).with_grad(),
                uni(rng, &[3], -0.5, 0.5).with_grad(),
                uni(rng, &[3], -0.3, 0.3),
                uni(rng, &[3], 0.5, 1.5),
                uni(rng, &[4, 3, 2, 2], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.batchnorm_eval(r[0], r[1], r[2], r[3], r[4], 1e-5)?;
            probe_sum(t, y, r[5])
        },
    ));
    v.push(NamedCheck::new(
        "op/leaky_relu",
        |rng| vec![away(rng, &[3, 4], 0.1, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.leaky_relu(r[0], 0.2)?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/relu",
        |rng| vec![away(rng, &[3, 4], 0.1, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.relu(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/tanh",
        |rng| vec![uni(rng, &[3, 4], -2.0, 2.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.tanh(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/exp",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.exp(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/log",
        |rng| vec![uni(rng, &[3, 4], 0.2, 2.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.log(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/sqrt",
        |rng| vec![uni(rng, &[3, 4], 0.2, 2.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.sqrt(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    for (name, op) in [
        ("op/add", 0usize),
        ("op/sub", 1),
        ("op/mul", 2),
    ] {
        v.push(NamedCheck::new(
            name,
            |rng| {
                vec![
                    uni(rng, &[3, 4], -1.0, 1.0).with_grad(),
                    uni(rng, &[3, 4], -1.0, 1.0).with_grad(),
                    uni(rng, &[3, 4], -1.0, 1.0),
                ]
            },
            move |t, r| {
                let y = match op {
                    0 => t.add(r[0], r[1])?,
                    1 => t.sub(r[0], r[1])?,
                    _ => t.mul(r[0], r[1])?,
                };
                probe_sum(t, y, r[2])
            },
        ));
    }
    v.push(NamedCheck::new(
        "op/div",
        |rng| {
            vec![
                uni(rng, &[3, 4], -1.0, 1.0).with_grad(),
                away(rng, &[3, 4], 0.4, 1.5).with_grad(),
                uni(rng, &[3, 4], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.div(r[0], r[1])?;
            probe_sum(t, y, r[2])
        },
    ));
    v.push(NamedCheck::new(
        "op/scale",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.scale(r[0], 1.7)?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/add_const",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0)],
        |t, r| {
            let y = t.add_const(r[0], 0.3)?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/sum",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad()],
        |t, r| t.sum(r[0]),
    ));
    v.push(NamedCheck::new(
        "op/mean",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad()],
        |t, r| t.mean(r[0]),
    ));
    v.push(NamedCheck::new(
        "op/mean_rows",
        |rng| vec![uni(rng, &[4, 3], -1.0, 1.0).with_grad(), uni(rng, &[3], -1.0, 1.0)],
        |t, r| {
            let y = t.mean_rows(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/sub_row",
        |rng| {
            vec![
                uni(rng, &[4, 3], -1.0, 1.0).with_grad(),
                uni(rng, &[3], -1.0, 1.0).with_grad(),
                uni(rng, &[4, 3], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.sub_row(r[0], r[1])?;
            probe_sum(t, y, r[2])
        },
    ));
    v.push(NamedCheck::new(
        "op/mul_row",
        |rng| {
            vec![
                uni(rng, &[4, 3], -1.0, 1.0).with_grad(),
                uni(rng, &[3], -1.0, 1.0).with_grad(),
                uni(rng, &[4, 3], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.mul_row(r[0], r[1])?;
            probe_sum(t, y, r[2])
        },
    ));
    v.push(NamedCheck::new(
        "op/reshape",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[2, 6], -1.0, 1.0)],
        |t, r| {
            let y = t.reshape(r[0], &[2, 6])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/concat",
        |rng| {
            vec![
                uni(rng, &[2, 3], -1.0, 1.0).with_grad(),
                uni(rng, &[2, 2], -1.0, 1.0).with_grad(),
                uni(rng, &[2, 5], -1.0, 1.0),
            ]
        },
        |t, r| {
            let y = t.concat(&[r[0], r[1]], 1)?;
            probe_sum(t, y, r[2])
        },
    ));
    v.push(NamedCheck::new(
        "op/slice",
        |rng| vec![uni(rng, &[3, 5], -1.0, 1.0).with_grad(), uni(rng, &[3, 3], -1.0, 1.0)],
        |t, r| {
            let y = t.slice(r[0], 1, 1, 3)?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/softmax_xent",
        |rng| vec![uni(rng, &[4, 3], -2.0, 2.0).with_grad()],
        |t, r| t.softmax_xent(r[0], &[0, 1, 2, 0]),
    ));
    v.push(NamedCheck::new(
        "op/mse",
        |rng| vec![uni(rng, &[3, 4], -1.0, 1.0).with_grad(), uni(rng, &[3, 4], -1.0, 1.0).with_grad()],
        |t, r| t.mse(r[0], r[1]),
    ));
    v.push(NamedCheck::new(
        "op/take_diag",
        |rng| vec![uni(rng, &[4, 4], -1.0, 1.0).with_grad(), uni(rng, &[4], -1.0, 1.0)],
        |t, r| {
            let y = t.take_diag(r[0])?;
            probe_sum(t, y, r[1])
        },
    ));
    v.push(NamedCheck::new(
        "op/lse_negatives",
        |rng| vec![uni(rng, &[4, 4], -1.0, 1.0).with_grad(), uni(rng, &[4], -1.0, 1.0)],
        |t, r| {
            let y = t.lse_negatives(r[0], -20.0)?;
            probe_sum(t, y, r[1])
        },
    ));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_linear() {
        let x = Array::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap().with_grad();
        let report =
            grad_check(&[x], &GradCheckOpts::default(), |tape, refs| tape.sum(refs[0])).unwrap();
        // Only perturbation round-off remains for a linear map.
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn sum_at_origin_is_exact() {
        // x +- eps is exact at zero, so the quotient is exactly 1.
        let x = Array::zeros(vec![4]).with_grad();
        let report =
            grad_check(&[x], &GradCheckOpts::default(), |tape, refs| tape.sum(refs[0])).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn tanh_chain_passes() {
        let x = Array::new(vec![6], vec![0.5, -0.8, 1.1, -0.3, 0.9, -1.4]).unwrap().with_grad();
        let report = grad_check(&[x], &GradCheckOpts::default(), |tape, refs| {
            let t = tape.tanh(refs[0])?;
            let sq = tape.mul(t, t)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let err = grad_check(&[x], &GradCheckOpts::default(), |tape, refs| tape.tanh(refs[0]));
        assert!(matches!(err.unwrap_err(), NdError::RootNotScalar { .. }));
    }

    #[test]
    fn coordinate_subsampling_caps_probes() {
        let x = Array::new(vec![100], vec![0.5; 100]).unwrap().with_grad();
        let opts = GradCheckOpts { max_coords_per_leaf: 7, ..Default::default() };
        let report = grad_check(&[x], &opts, |tape, refs| tape.sum(refs[0])).unwrap();
        assert_eq!(report.coords_checked, 7);
    }
}
