//! Gradient verification: central finite differences against the tape.
//!
//! `grad_check` probes one scalar-valued tape program at one leaf;
//! `gradcheck_suite` runs a named battery over every primitive, every
//! layer, and a tiny end-to-end model, 5 seeds each with standard
//! normal draws and dropout disabled.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{mse_loss, AdError, NodeId, Tape};
use crate::model::{BatchTargets, DfmimConfig, DfmimModel, Task};
use crate::nn::{
    dense, encoder_layer, self_attention, Activation, AttentionP, DenseP, EncoderP, Mode,
};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// Relative-error floor: coordinates where both gradients are below
/// this are compared absolutely.
const DENOM_FLOOR: f64 = 1e-8;

/// Default finite-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` against central finite
/// differences, coordinate by coordinate. `f` receives a fresh tape and
/// the leaf id for `x` and must return a scalar root. The result is the
/// max over coordinates of |analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8).
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64, AdError>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId, AdError>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = f(&mut tape, xid)?;
    let mut grads = tape.backward(root)?;
    let analytic = grads
        .take(xid)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut eval = |xv: &Tensor| -> Result<f64, AdError> {
        let mut t = Tape::new();
        let id = t.leaf(xv.clone());
        let r = f(&mut t, id)?;
        Ok(t.scalar_value(r))
    };

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(numeric)), DENOM_FLOOR);
        let err = libm::fabs(a - numeric) / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// One named entry of the verification battery.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("sized")
}

/// Standard normal draws pushed away from the ReLU kink so the
/// two-sided difference never straddles it.
fn randn_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = randn(rng, rows, cols);
    for v in t.data_mut() {
        if libm::fabs(*v) < 0.05 {
            *v = if *v < 0.0 { *v - 0.1 } else { *v + 0.1 };
        }
    }
    t
}

/// Scalar probe: sum(x ⊙ w) with a fixed random weighting, so every
/// coordinate of x carries a distinct gradient signal.
fn weighted_sum(tape: &mut Tape, x: NodeId, w: &Tensor) -> Result<NodeId, AdError> {
    let wid = tape.constant(w.clone());
    let prod = tape.mul(x, wid)?;
    Ok(tape.sum(prod))
}

/// Max relative error between the tape gradients of every model
/// parameter and finite differences through the full forward + loss,
/// probing `coords_per_param` evenly spaced coordinates of each.
///
/// Each coordinate is probed at several step sizes and keeps its best
/// agreement: wide steps beat round-off where the true gradient is
/// near zero, narrow steps beat truncation where curvature is large. A
/// wrong analytic gradient disagrees at every step.
fn model_grad_max_rel_err(
    model: &DfmimModel,
    xs: &[&Tensor],
    targets: &BatchTargets,
    steps: &[f64],
    coords_per_param: usize,
) -> f64 {
    let loss_of = |m: &DfmimModel| -> f64 {
        let mut fwd = m
            .forward_batch(xs, true, &mut Mode::Eval)
            .expect("forward");
        let loss = m.loss_on(&mut fwd, targets).expect("loss");
        fwd.tape.scalar_value(loss)
    };

    let mut fwd = model
        .forward_batch(xs, true, &mut Mode::Eval)
        .expect("forward");
    let loss = model.loss_on(&mut fwd, targets).expect("loss");
    let mut grads = fwd.tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = fwd
        .placed
        .param_ids
        .iter()
        .enumerate()
        .map(|(pi, &id)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(model.params()[pi].shape().to_vec()))
        })
        .collect();

    let mut max_err = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let len = model.params()[pi].len();
        let stride = (len / coords_per_param).max(1);
        for ci in (0..len).step_by(stride).take(coords_per_param) {
            let a = grad.data()[ci];
            let mut best = f64::INFINITY;
            for &eps in steps {
                let mut mp = model.clone();
                mp.params_mut()[pi].data_mut()[ci] += eps;
                let fp = loss_of(&mp);
                let mut mm = model.clone();
                mm.params_mut()[pi].data_mut()[ci] -= eps;
                let fm = loss_of(&mm);
                let numeric = (fp - fm) / (2.0 * eps);
                let denom =
                    libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(numeric)), DENOM_FLOOR);
                let err = libm::fabs(a - numeric) / denom;
                if err < best {
                    best = err;
                }
            }
            if best > max_err {
                max_err = best;
            }
        }
    }
    max_err
}

/// Runs the full battery. Each case reports the max relative error over
/// 5 seeds; quadratic cases carry a 1e-7 tolerance, layers 1e-4.
pub fn gradcheck_suite() -> Vec<GradCheck> {
    const LAYER_TOL: f64 = 1e-4;
    const QUAD_TOL: f64 = 1e-7;
    let mut out = Vec::new();
    let mut case = |name: &'static str,
                    tol: f64,
                    run: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let salt = out.len() as u64;
        let mut worst = 0.0f64;
        for seed in 0..5u64 {
            let mut rng = stream(seed, Domain::Synth, 1000 + salt);
            let err = run(&mut rng);
            if err > worst {
                worst = err;
            }
        }
        out.push(GradCheck {
            name,
            max_rel_err: worst,
            tol,
        });
    };

    case("sum_of_squares", QUAD_TOL, &mut |rng| {
        let x = randn(rng, 3, 4);
        grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("mse_loss", QUAD_TOL, &mut |rng| {
        let pred = randn(rng, 3, 2);
        let target = randn(rng, 3, 2);
        grad_check(
            |t, p| {
                let tt = t.constant(target.clone());
                mse_loss(t, p, tt)
            },
            &pred,
            FD_EPS,
        )
        .expect("check")
    });

    case("tanh", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 3, 3);
        let w = randn(rng, 3, 3);
        grad_check(
            |t, x| {
                let y = t.tanh(x);
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("relu", LAYER_TOL, &mut |rng| {
        let x = randn_off_kink(rng, 3, 3);
        let w = randn(rng, 3, 3);
        grad_check(
            |t, x| {
                let y = t.relu(x);
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("softmax", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 3, 4);
        let w = randn(rng, 3, 4);
        grad_check(
            |t, x| {
                let y = t.softmax(x);
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("matmul", LAYER_TOL, &mut |rng| {
        let a = randn(rng, 3, 4);
        let b = randn(rng, 4, 2);
        let w = randn(rng, 3, 2);
        grad_check(
            |t, a| {
                let bid = t.constant(b.clone());
                let y = t.matmul(a, bid)?;
                weighted_sum(t, y, &w)
            },
            &a,
            FD_EPS,
        )
        .expect("check")
    });

    case("add_broadcast", LAYER_TOL, &mut |rng| {
        let bias = randn(rng, 1, 4);
        let x = randn(rng, 3, 4);
        let w = randn(rng, 3, 4);
        grad_check(
            |t, b| {
                let xid = t.constant(x.clone());
                let y = t.add(xid, b)?;
                weighted_sum(t, y, &w)
            },
            &bias,
            FD_EPS,
        )
        .expect("check")
    });

    case("scale_mul", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 2, 5);
        let m = randn(rng, 2, 5);
        let w = randn(rng, 2, 5);
        grad_check(
            |t, x| {
                let mid = t.constant(m.clone());
                let p = t.mul(x, mid)?;
                let s = t.scale(p, 1.7);
                weighted_sum(t, s, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("transpose_slice_concat", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 3, 4);
        let w = randn(rng, 4, 3);
        grad_check(
            |t, x| {
                let xt = t.transpose(x); // 4 x 3
                let a = t.slice_cols(xt, 0, 2)?;
                let b = t.slice_cols(xt, 2, 1)?;
                let y = t.concat_cols(&[b, a])?; // 4 x 3, shuffled
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("layer_norm_input", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 3, 5);
        let gamma = randn(rng, 1, 5);
        let beta = randn(rng, 1, 5);
        let w = randn(rng, 3, 5);
        grad_check(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(x, g, b)?;
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("layer_norm_gain", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 3, 5);
        let gamma = randn(rng, 1, 5);
        let beta = randn(rng, 1, 5);
        let w = randn(rng, 3, 5);
        grad_check(
            |t, g| {
                let xid = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(xid, g, b)?;
                weighted_sum(t, y, &w)
            },
            &gamma,
            FD_EPS,
        )
        .expect("check")
    });

    case("focal_loss", LAYER_TOL, &mut |rng| {
        let logits = randn(rng, 3, 4);
        let labels = [0usize, 2, 1];
        let weights = alloc::vec![0.3, 0.2, 0.4, 0.1];
        grad_check(
            |t, z| t.focal_loss(z, &labels, 2.0, Some(weights.clone())),
            &logits,
            FD_EPS,
        )
        .expect("check")
    });

    case("dense_input", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 4, 3);
        let wt = randn(rng, 3, 2);
        let bt = randn(rng, 1, 2);
        let w = randn(rng, 4, 2);
        grad_check(
            |t, x| {
                let p = DenseP {
                    w: t.constant(wt.clone()),
                    b: t.constant(bt.clone()),
                };
                let y = dense(t, x, &p, Activation::Tanh)?;
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("dense_weights", LAYER_TOL, &mut |rng| {
        let x = randn_off_kink(rng, 4, 3);
        let wt = randn(rng, 3, 2);
        let bt = randn(rng, 1, 2);
        let w = randn(rng, 4, 2);
        grad_check(
            |t, wleaf| {
                let xid = t.constant(x.clone());
                let p = DenseP {
                    w: wleaf,
                    b: t.constant(bt.clone()),
                };
                let y = dense(t, xid, &p, Activation::Relu)?;
                weighted_sum(t, y, &w)
            },
            &wt,
            FD_EPS,
        )
        .expect("check")
    });

    case("self_attention", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 4, 4);
        let wq = randn(rng, 4, 4);
        let wk = randn(rng, 4, 4);
        let wv = randn(rng, 4, 4);
        let wo = randn(rng, 4, 4);
        let w = randn(rng, 4, 4);
        grad_check(
            |t, x| {
                let p = AttentionP {
                    wq: t.constant(wq.clone()),
                    wk: t.constant(wk.clone()),
                    wv: t.constant(wv.clone()),
                    wo: t.constant(wo.clone()),
                };
                let y = self_attention(t, x, &p, 2)?;
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("encoder_layer", LAYER_TOL, &mut |rng| {
        let x = randn(rng, 4, 4);
        let wq = randn(rng, 4, 4);
        let wk = randn(rng, 4, 4);
        let wv = randn(rng, 4, 4);
        let wo = randn(rng, 4, 4);
        let ff1w = randn(rng, 4, 6);
        let ff1b = randn(rng, 1, 6);
        let ff2w = randn(rng, 6, 4);
        let ff2b = randn(rng, 1, 4);
        let ones = Tensor::new(alloc::vec![1, 4], alloc::vec![1.0; 4]).expect("sized");
        let zeros = Tensor::zeros(alloc::vec![1, 4]);
        let w = randn(rng, 4, 4);
        grad_check(
            |t, x| {
                let p = EncoderP {
                    attn: AttentionP {
                        wq: t.constant(wq.clone()),
                        wk: t.constant(wk.clone()),
                        wv: t.constant(wv.clone()),
                        wo: t.constant(wo.clone()),
                    },
                    ln1_gamma: t.constant(ones.clone()),
                    ln1_beta: t.constant(zeros.clone()),
                    ff1: DenseP {
                        w: t.constant(ff1w.clone()),
                        b: t.constant(ff1b.clone()),
                    },
                    ff2: DenseP {
                        w: t.constant(ff2w.clone()),
                        b: t.constant(ff2b.clone()),
                    },
                    ln2_gamma: t.constant(ones.clone()),
                    ln2_beta: t.constant(zeros.clone()),
                };
                let y = encoder_layer(t, x, &p, 2, &mut Mode::Eval)?;
                weighted_sum(t, y, &w)
            },
            &x,
            FD_EPS,
        )
        .expect("check")
    });

    case("basis_score_weights", LAYER_TOL, &mut |rng| {
        // Quadrature score of a 1 -> 8 -> 1 micro-net against a fixed
        // channel, differentiated through the hidden weights.
        let n = 12usize;
        let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let channel: Vec<f64> = grid.iter().map(|&t| libm::sin(core::f64::consts::TAU * t)).collect();
        let h = 1.0 / (n - 1) as f64;
        let mut weights = alloc::vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        let w1 = randn(rng, 1, 8);
        let b1 = randn(rng, 1, 8);
        let w2 = randn(rng, 8, 1);
        let b2 = randn(rng, 1, 1);
        let t_col = Tensor::col(grid.clone());
        let ch_w: Vec<f64> = channel.iter().zip(&weights).map(|(c, w)| c * w).collect();
        let chan_row = Tensor::new(alloc::vec![1, n], ch_w).expect("sized");
        grad_check(
            |t, w1leaf| {
                let tin = t.constant(t_col.clone());
                let l1 = DenseP {
                    w: w1leaf,
                    b: t.constant(b1.clone()),
                };
                let hid = dense(t, tin, &l1, Activation::Relu)?;
                let l2 = DenseP {
                    w: t.constant(w2.clone()),
                    b: t.constant(b2.clone()),
                };
                let theta = dense(t, hid, &l2, Activation::Identity)?;
                let row = t.constant(chan_row.clone());
                let score = t.matmul(row, theta)?; // 1 x 1
                Ok(t.sum(score))
            },
            &w1,
            FD_EPS,
        )
        .expect("check")
    });

    case("head_weights", LAYER_TOL, &mut |rng| {
        let scores = randn(rng, 3, 4);
        let w1 = randn(rng, 4, 6);
        let b1 = randn(rng, 1, 6);
        let w2 = randn(rng, 6, 2);
        let b2 = randn(rng, 1, 2);
        let w = randn(rng, 3, 2);
        grad_check(
            |t, w1leaf| {
                let s = t.constant(scores.clone());
                let l1 = DenseP {
                    w: w1leaf,
                    b: t.constant(b1.clone()),
                };
                let hcur = dense(t, s, &l1, Activation::Tanh)?;
                let l2 = DenseP {
                    w: t.constant(w2.clone()),
                    b: t.constant(b2.clone()),
                };
                let y = dense(t, hcur, &l2, Activation::Identity)?;
                weighted_sum(t, y, &w)
            },
            &w1,
            FD_EPS,
        )
        .expect("check")
    });

    case("model_end_to_end", LAYER_TOL, &mut |rng| {
        let cfg = DfmimConfig {
            p: 2,
            k: 2,
            c: 3,
            n_grid: 8,
            n_enc: 1,
            heads: 1,
            ff_dim: 4,
            dropout: 0.0,
            lr: 1e-3,
            batch_size: 3,
            epochs: 1,
            focal_gamma: 2.0,
            basis_l2: 1e-4,
            seed: rng.random::<u64>(),
            task: Task::Classification,
            basis_hidden: alloc::vec![8],
            head_hidden: alloc::vec![6],
            positional_encoding: true,
            normalize_features: false,
            standardize_targets: false,
        };
        let mut model = DfmimModel::init(cfg).expect("init");
        // Probe at a generic parameter point. Freshly initialized
        // biases are exactly zero, which parks the first grid point
        // (t=0) of every basis net exactly on the ReLU kink where the
        // two-sided difference disagrees with the subgradient, and
        // leaves many true gradients near the FD noise floor.
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let xs: Vec<Tensor> = (0..3).map(|_| randn(rng, 8, 2)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let targets = BatchTargets::Labels(alloc::vec![0, 2, 1]);
        model_grad_max_rel_err(&model, &refs, &targets, &[1e-5, 1e-4, 1e-3], 4)
    });

    out
}
