//! Central finite-difference gradient verification.
//!
//! The oracle differentiates a scalar loss numerically — it never touches
//! the tape's backward pass — and compares against reverse-mode gradients.
//! Used by the unit/acceptance tests and by the `grad-check` CLI subcommand.
//!
//! All checks run in 64-bit: central differences at h = 1e-5 carry ~1e-10
//! absolute error for O(1) values, which leaves four orders of headroom
//! under the 1e-5/1e-6 relative tolerances used here.

use crate::error::Result;
use crate::model::{
    self, forward_model, ForwardOptions, GatePlan, ModelConfig, ModelWeights, Variant,
};
use crate::rng::KeyedRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Step used by central differences throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: below this magnitude the comparison degrades to an
/// absolute one so finite-difference noise on near-zero gradients cannot
/// dominate the ratio.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference gradients of `f` w.r.t. every element of `inputs`.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
    h: f64,
) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = f(&work);
            work[i].data_mut()[e] = orig - h;
            let down = f(&work);
            work[i].data_mut()[e] = orig;
            g.data_mut()[e] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Check one tape-built scalar function: reverse-mode vs central differences.
///
/// `build` receives a fresh tape plus one differentiable leaf per input and
/// must return the scalar loss node. The same builder drives both routes, so
/// the comparison isolates the backward pass.
pub fn check_tape_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<OpCheck> {
    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    // Finite differences over the same forward computation.
    let numeric = numeric_grads(
        inputs,
        |xs| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids).expect("builder succeeded on unperturbed inputs");
            tape.value(loss).data()[0]
        },
        FD_STEP,
    );

    let mut max_err = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            max_err = max_err.max(rel_err(av, nv));
        }
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: max_err,
        tolerance,
    })
}

fn rand_tensor(shape: Vec<usize>, rng: &mut KeyedRng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::new(shape, data).expect("well-formed shape")
}

/// Gradient-check every primitive tape op against the oracle.
pub fn check_all_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = KeyedRng::new(seed, &[0x6f70]);
    let tol = 1e-6;
    let mut out = Vec::new();

    let a = rand_tensor(vec![3, 4], &mut rng, 0.8);
    let b = rand_tensor(vec![4, 2], &mut rng, 0.8);
    out.push(check_tape_fn("matmul", &[a, b], tol, |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        Ok(t.sum(y))
    })?);

    // Weighted sums give non-uniform upstream gradients.
    let w32 = rand_tensor(vec![3, 2], &mut rng, 1.0);
    let a = rand_tensor(vec![3, 4], &mut rng, 0.8);
    let b = rand_tensor(vec![4, 2], &mut rng, 0.8);
    out.push(check_tape_fn(
        "matmul_weighted",
        &[a, b],
        tol,
        move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            let w = t.constant(w32.clone());
            let wy = t.mul(y, w)?;
            Ok(t.sum(wy))
        },
    )?);

    let x = rand_tensor(vec![2, 3], &mut rng, 1.0);
    let w = rand_tensor(vec![2, 3], &mut rng, 1.0);
    out.push(check_tape_fn("transpose", &[x], tol, move |t, ids| {
        let xt = t.transpose(ids[0]);
        let w = t.constant(w.clone());
        let y = t.matmul(xt, w)?;
        Ok(t.sum(y))
    })?);

    let x = rand_tensor(vec![2, 5], &mut rng, 1.0);
    let y = rand_tensor(vec![2, 5], &mut rng, 1.0);
    let wu = rand_tensor(vec![2, 5], &mut rng, 1.0);
    out.push(check_tape_fn("add", &[x, y], tol, move |t, ids| {
        let s = t.add(ids[0], ids[1])?;
        let w = t.constant(wu.clone());
        let sw = t.mul(s, w)?;
        Ok(t.sum(sw))
    })?);

    let x = rand_tensor(vec![3, 4], &mut rng, 1.0);
    let bias = rand_tensor(vec![4], &mut rng, 1.0);
    let wu = rand_tensor(vec![3, 4], &mut rng, 1.0);
    out.push(check_tape_fn("add_bias", &[x, bias], tol, move |t, ids| {
        let s = t.add_bias(ids[0], ids[1])?;
        let w = t.constant(wu.clone());
        let sw = t.mul(s, w)?;
        Ok(t.sum(sw))
    })?);

    let x = rand_tensor(vec![2, 4], &mut rng, 1.0);
    let y = rand_tensor(vec![2, 4], &mut rng, 1.0);
    out.push(check_tape_fn("mul", &[x, y], tol, |t, ids| {
        let m = t.mul(ids[0], ids[1])?;
        Ok(t.sum(m))
    })?);

    let x = rand_tensor(vec![3, 3], &mut rng, 1.0);
    out.push(check_tape_fn("scale", &[x], tol, |t, ids| {
        let y = t.scale(ids[0], -1.7);
        Ok(t.sum(y))
    })?);

    let x = rand_tensor(vec![4, 4], &mut rng, 1.5);
    let wu = rand_tensor(vec![4, 4], &mut rng, 1.0);
    out.push(check_tape_fn("gelu", &[x], tol, move |t, ids| {
        let g = t.gelu(ids[0]);
        let w = t.constant(wu.clone());
        let gw = t.mul(g, w)?;
        Ok(t.sum(gw))
    })?);

    let x = rand_tensor(vec![3, 5], &mut rng, 1.0);
    let wu = rand_tensor(vec![3, 5], &mut rng, 1.0);
    out.push(check_tape_fn("softmax", &[x], tol, move |t, ids| {
        let s = t.softmax(ids[0], 1)?;
        let w = t.constant(wu.clone());
        let sw = t.mul(s, w)?;
        Ok(t.sum(sw))
    })?);

    let x = rand_tensor(vec![3, 6], &mut rng, 1.0);
    let gain = rand_tensor(vec![6], &mut rng, 0.5);
    let bias = rand_tensor(vec![6], &mut rng, 0.5);
    let wu = rand_tensor(vec![3, 6], &mut rng, 1.0);
    out.push(check_tape_fn(
        "layer_norm",
        &[x, gain, bias],
        tol,
        move |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-12)?;
            let w = t.constant(wu.clone());
            let yw = t.mul(y, w)?;
            Ok(t.sum(yw))
        },
    )?);

    let table = rand_tensor(vec![7, 3], &mut rng, 1.0);
    let wu = rand_tensor(vec![4, 3], &mut rng, 1.0);
    out.push(check_tape_fn(
        "embedding_lookup",
        &[table],
        tol,
        move |t, ids| {
            let e = t.embedding(ids[0], &[0, 3, 3, 6])?;
            let w = t.constant(wu.clone());
            let ew = t.mul(e, w)?;
            Ok(t.sum(ew))
        },
    )?);

    let x = rand_tensor(vec![2, 6], &mut rng, 1.0);
    out.push(check_tape_fn("sum", &[x], tol, |t, ids| Ok(t.sum(ids[0])))?);

    let x = rand_tensor(vec![2, 6], &mut rng, 1.0);
    out.push(check_tape_fn("mean", &[x], tol, |t, ids| Ok(t.mean(ids[0])))?);

    let logits = rand_tensor(vec![4, 9], &mut rng, 1.2);
    out.push(check_tape_fn(
        "cross_entropy_with_mask",
        &[logits],
        tol,
        |t, ids| t.cross_entropy_masked(ids[0], &[2, 8, 0, 5], &[true, false, true, true]),
    )?);

    let x = rand_tensor(vec![4, 6], &mut rng, 1.0);
    let wu = rand_tensor(vec![4, 6], &mut rng, 1.0);
    out.push(check_tape_fn("slice_concat", &[x], tol, move |t, ids| {
        let left = t.col_slice(ids[0], 0, 2);
        let right = t.col_slice(ids[0], 2, 4);
        let cols = t.concat_cols(&[left, right])?;
        let top = t.row_slice(cols, 0, 1);
        let bottom = t.row_slice(cols, 1, 3);
        let y = t.concat_rows(&[top, bottom])?;
        let w = t.constant(wu.clone());
        let yw = t.mul(y, w)?;
        Ok(t.sum(yw))
    })?);

    Ok(out)
}

/// What a block-level check runs over the shared 13-leaf input layout
/// `[x, w_q, w_k, w_v, w_o, w1, b1, w2, b2, ln1_g, ln1_b, ln2_g, ln2_b]`.
#[derive(Debug, Clone, Copy)]
enum BlockOp {
    Attention,
    FeedForward,
    PostLn,
    PreLn,
    /// Gate fixed on, keep probability applied in training mode.
    St { p: f64 },
}

impl BlockOp {
    fn name(&self) -> String {
        match self {
            BlockOp::Attention => "self_attention".into(),
            BlockOp::FeedForward => "feed_forward".into(),
            BlockOp::PostLn => "postln_block".into(),
            BlockOp::PreLn => "preln_block".into(),
            BlockOp::St { p } => format!("st_block_p{p}"),
        }
    }
}

fn check_block_op(op: BlockOp, seed: u64, tolerance: f64) -> Result<OpCheck> {
    use crate::model::forward::{
        attention_nodes, ffn_nodes, postln_nodes, preln_nodes, BlockCtx, BlockNodes, DropState,
    };

    // Dims from the block-level contracts: seq 3, hidden 4, two heads.
    let (seq, d, heads) = (3usize, 4usize, 2usize);
    let ff = 4 * d;
    let mut rng = KeyedRng::new(seed, &[0x626c6b]);
    let inputs = vec![
        rand_tensor(vec![seq, d], &mut rng, 0.7),
        rand_tensor(vec![d, d], &mut rng, 0.4),
        rand_tensor(vec![d, d], &mut rng, 0.4),
        rand_tensor(vec![d, d], &mut rng, 0.4),
        rand_tensor(vec![d, d], &mut rng, 0.4),
        rand_tensor(vec![d, ff], &mut rng, 0.4),
        rand_tensor(vec![ff], &mut rng, 0.2),
        rand_tensor(vec![ff, d], &mut rng, 0.4),
        rand_tensor(vec![d], &mut rng, 0.2),
        rand_tensor(vec![d], &mut rng, 0.5),
        rand_tensor(vec![d], &mut rng, 0.2),
        rand_tensor(vec![d], &mut rng, 0.5),
        rand_tensor(vec![d], &mut rng, 0.2),
    ];
    let weight = rand_tensor(vec![seq, d], &mut rng, 1.0);

    check_tape_fn(&op.name(), &inputs, tolerance, move |t, ids| {
        let nodes = BlockNodes {
            w_q: ids[1],
            w_k: ids[2],
            w_v: ids[3],
            w_o: ids[4],
            w1: ids[5],
            b1: ids[6],
            w2: ids[7],
            b2: ids[8],
            ln1_gain: ids[9],
            ln1_bias: ids[10],
            ln2_gain: ids[11],
            ln2_bias: ids[12],
        };
        let ctx = BlockCtx {
            heads,
            batch: 1,
            seq,
            eps: 1e-12,
        };
        let mut drop = DropState::off();
        let out = match op {
            BlockOp::Attention => attention_nodes(t, ids[0], &nodes, heads, 1, seq, &mut drop)?,
            BlockOp::FeedForward => ffn_nodes(t, ids[0], &nodes, &mut drop)?,
            BlockOp::PostLn => postln_nodes(t, ids[0], &nodes, &ctx, 1.0, &mut drop)?,
            BlockOp::PreLn => preln_nodes(t, ids[0], &nodes, &ctx, 1.0, &mut drop)?,
            BlockOp::St { p } => preln_nodes(t, ids[0], &nodes, &ctx, 1.0 / p, &mut drop)?,
        };
        let w = t.constant(weight.clone());
        let ow = t.mul(out, w)?;
        Ok(t.sum(ow))
    })
}

/// Block-level checks: attention, feed-forward and all three block
/// orderings (the switchable one with its gate fixed on and the 1/p
/// rescale active), every parameter and the input included.
pub fn check_blocks(seed: u64) -> Result<Vec<OpCheck>> {
    let tol = 1e-5;
    [
        BlockOp::Attention,
        BlockOp::FeedForward,
        BlockOp::PostLn,
        BlockOp::PreLn,
        BlockOp::St { p: 1.0 },
        BlockOp::St { p: 0.7 },
    ]
    .into_iter()
    .map(|op| check_block_op(op, seed, tol))
    .collect()
}

fn mlm_loss_from_weights(
    weights: &ModelWeights<f64>,
    tokens: &[Vec<usize>],
    labels: &[usize],
    mask: &[bool],
) -> f64 {
    let mut tape = Tape::new();
    let gates = GatePlan::full_depth(weights.config.layers);
    let bindings = forward_model(
        &mut tape,
        weights,
        tokens,
        &gates,
        &ForwardOptions::evaluation(),
    )
    .expect("forward on valid dims");
    let loss = tape
        .cross_entropy_masked(bindings.logits, labels, mask)
        .expect("valid labels");
    tape.value(loss).data()[0]
}

/// Gradient-check a whole model (every parameter) against the oracle.
///
/// Builds the MLM loss for one small batch, runs one backward pass, then
/// perturbs every parameter element with central differences.
pub fn check_full_model(
    variant: Variant,
    cfg: &ModelConfig,
    seed: u64,
    tolerance: f64,
) -> Result<OpCheck> {
    let mut cfg = cfg.clone();
    cfg.variant = variant;
    cfg.validate()?;
    let weights = ModelWeights::<f64>::init(&cfg, seed);

    let mut rng = KeyedRng::new(seed, &[0x6261]);
    let seq = cfg.max_seq.min(4);
    let batch = 2;
    let tokens: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.below(cfg.vocab)).collect())
        .collect();
    let labels: Vec<usize> = (0..batch * seq).map(|_| rng.below(cfg.vocab)).collect();
    let mask: Vec<bool> = (0..batch * seq).map(|i| i % 2 == 0).collect();

    // Reverse-mode gradients for every parameter.
    let mut tape = Tape::new();
    let gates = GatePlan::full_depth(cfg.layers);
    let bindings = forward_model(
        &mut tape,
        &weights,
        &tokens,
        &gates,
        &ForwardOptions::evaluation(),
    )?;
    let loss = tape.cross_entropy_masked(bindings.logits, &labels, &mask)?;
    tape.backward(loss)?;
    let grads = model::collect_grads(&tape, &bindings);

    let mut max_err = 0.0_f64;
    for name in weights.param_names() {
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(weights.param(&name).shape().to_vec()));
        let base = weights.param(&name).clone();
        let mut perturbed = weights.clone();
        for e in 0..base.numel() {
            let orig = base.data()[e];
            perturbed.param_mut(&name).data_mut()[e] = orig + FD_STEP;
            let up = mlm_loss_from_weights(&perturbed, &tokens, &labels, &mask);
            perturbed.param_mut(&name).data_mut()[e] = orig - FD_STEP;
            let down = mlm_loss_from_weights(&perturbed, &tokens, &labels, &mask);
            perturbed.param_mut(&name).data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic.data()[e], fd));
        }
    }
    Ok(OpCheck {
        name: format!("full_model_{}", cfg.variant.name()),
        max_rel_err: max_err,
        tolerance,
    })
}
