//! Numerical diagnostics over a model snapshot: per-layer gradient norms,
//! norm-preserving ratios, input/output similarity, lesioning, residual
//! means, and the gradient-decomposition identity check.
//!
//! Everything here is a pure measurement of `(weights, batch)`; dropout is
//! off and gates are full-on unless an analysis says otherwise.

use crate::error::{Error, Result};
use crate::model::{
    collect_grads, forward_blocks_from, forward_model, ForwardOptions, GatePlan, ModelWeights,
};
use crate::rng::keyed_bernoulli;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::train::{evaluate, Corpus, MlmBatch};

const LESION_STREAM: u64 = 0x6c65_7369;

/// Central-difference step for the decomposition check. Smaller than the
/// op-level gradcheck step because the recomputed block tail stacks several
/// nonlinearities: truncation error scales with h^2 times third
/// derivatives that grow with depth, and the 1e-8 residual bound needs
/// ~1e-9 headroom. Roundoff (about 1e-16/h) stays below that here.
const DECOMP_FD_STEP: f64 = 5e-7;

/// One layer's profile row as emitted by the `analyze` pipeline.
#[derive(Debug, Clone)]
pub struct LayerProfile {
    pub layer: usize,
    pub weight_grad_norm: f64,
    pub input_grad_norm: f64,
    pub output_grad_norm: f64,
    /// `input grad norm / output grad norm`; `None` when the output norm
    /// vanished and the ratio is excluded.
    pub norm_preserving_ratio: Option<f64>,
    pub l2_distance: f64,
    /// Arccosine similarity in degrees; `None` when a zero vector made the
    /// angle undefined for every position.
    pub arccos_deg: Option<f64>,
    pub residual_mean_norm: f64,
    pub residual_mean_relative: f64,
}

fn forward_with_loss<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<(crate::model::ModelBindings, NodeId)> {
    let plan = GatePlan::full_depth(weights.config.layers);
    let bindings = forward_model(
        tape,
        weights,
        &batch.tokens,
        &plan,
        &ForwardOptions::evaluation(),
    )?;
    for &b in &bindings.boundaries {
        tape.retain_grad(b);
    }
    let loss = tape.cross_entropy_masked(bindings.logits, &batch.labels, &batch.mask)?;
    Ok((bindings, loss))
}

/// Per-block 2-norms of the weight-matrix gradients (projections and FFN
/// matrices; biases and norm parameters are not part of the aggregate)
/// from one backward pass on `batch`.
pub fn layer_grad_norms<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (bindings, loss) = forward_with_loss(&mut tape, weights, batch)?;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bindings);
    let mut norms = Vec::with_capacity(weights.config.layers);
    for l in 0..weights.config.layers {
        let mut acc = 0.0_f64;
        for field in [
            "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ffn.w1", "ffn.w2",
        ] {
            let g = grads
                .get(&format!("block{l}.{field}"))
                .expect("full-depth pass touches every block");
            for &v in g.data() {
                let v = v.to_f64();
                if !v.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient in block {l} ({field})"
                    )));
                }
                acc += v * v;
            }
        }
        norms.push(acc.sqrt());
    }
    Ok(norms)
}

/// Gradient norms at each block boundary, from one backward pass:
/// `(input_norm, output_norm, ratio)` per block.
pub fn norm_preserving_ratios<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let mut tape = Tape::new();
    let (bindings, loss) = forward_with_loss(&mut tape, weights, batch)?;
    tape.backward(loss)?;
    let boundary_norms: Vec<f64> = bindings
        .boundaries
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.norm2().to_f64()).unwrap_or(0.0))
        .collect();
    for (l, n) in boundary_norms.iter().enumerate() {
        if !n.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite boundary gradient at layer {l}"
            )));
        }
    }
    let mut out = Vec::with_capacity(weights.config.layers);
    for l in 0..weights.config.layers {
        let input = boundary_norms[l];
        let output = boundary_norms[l + 1];
        let ratio = (output > 0.0).then(|| input / output);
        out.push((input, output, ratio));
    }
    Ok(out)
}

/// Per-layer `(mean L2 distance, mean arccosine in degrees, excluded)`
/// between block inputs and outputs, averaged over token positions; rows
/// where either vector has zero norm are excluded from the angle and
/// counted.
pub fn io_similarity<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<Vec<(f64, Option<f64>, usize)>> {
    let mut tape = Tape::new();
    let plan = GatePlan::full_depth(weights.config.layers);
    let bindings = forward_model(
        &mut tape,
        weights,
        &batch.tokens,
        &plan,
        &ForwardOptions::evaluation(),
    )?;
    let d = weights.config.hidden;
    let mut out = Vec::with_capacity(weights.config.layers);
    for l in 0..weights.config.layers {
        let a = tape.value(bindings.boundaries[l]).data();
        let b = tape.value(bindings.boundaries[l + 1]).data();
        let rows = a.len() / d;
        let mut l2_sum = 0.0_f64;
        let mut angle_sum = 0.0_f64;
        let mut angle_count = 0usize;
        let mut excluded = 0usize;
        for r in 0..rows {
            let ra = &a[r * d..(r + 1) * d];
            let rb = &b[r * d..(r + 1) * d];
            let mut dist = 0.0_f64;
            let mut dot = 0.0_f64;
            let mut na = 0.0_f64;
            let mut nb = 0.0_f64;
            for c in 0..d {
                let (va, vb) = (ra[c].to_f64(), rb[c].to_f64());
                dist += (va - vb) * (va - vb);
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            l2_sum += dist.sqrt();
            if na > 0.0 && nb > 0.0 {
                // Identical vectors are exactly parallel; the acos route
                // would round to ~1e-7 degrees instead of zero.
                let angle = if dist == 0.0 {
                    0.0
                } else {
                    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
                    cos.acos().to_degrees()
                };
                angle_sum += angle;
                angle_count += 1;
            } else {
                excluded += 1;
            }
        }
        let l2 = l2_sum / rows as f64;
        let angle = (angle_count > 0).then(|| angle_sum / angle_count as f64);
        if !l2.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite similarity at layer {l}"
            )));
        }
        out.push((l2, angle, excluded));
    }
    Ok(out)
}

/// Per-layer residual diagnostics for identity-path variants:
/// `(norm of the mean residual vector, that norm relative to the mean
/// input-activation row norm)`.
pub fn residual_mean<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<Vec<(f64, f64)>> {
    if !weights.config.variant.has_final_norm() {
        return Err(Error::contract(
            "residual_mean applies to identity-path (PreLN/ST) variants only",
        ));
    }
    let mut tape = Tape::new();
    let plan = GatePlan::full_depth(weights.config.layers);
    let bindings = forward_model(
        &mut tape,
        weights,
        &batch.tokens,
        &plan,
        &ForwardOptions::evaluation(),
    )?;
    let d = weights.config.hidden;
    let mut out = Vec::with_capacity(weights.config.layers);
    for l in 0..weights.config.layers {
        let a = tape.value(bindings.boundaries[l]).data();
        let b = tape.value(bindings.boundaries[l + 1]).data();
        let rows = a.len() / d;
        let mut mean_residual = vec![0.0_f64; d];
        let mut act_norm_sum = 0.0_f64;
        for r in 0..rows {
            let mut na = 0.0_f64;
            for c in 0..d {
                let va = a[r * d + c].to_f64();
                mean_residual[c] += (b[r * d + c].to_f64() - va) / rows as f64;
                na += va * va;
            }
            act_norm_sum += na.sqrt();
        }
        let norm = mean_residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        let act = act_norm_sum / rows as f64;
        out.push((norm, if act > 0.0 { norm / act } else { 0.0 }));
    }
    Ok(out)
}

/// Validation loss with layers removed at a uniform keep ratio.
///
/// Gates are one Bernoulli(theta) draw per layer keyed by
/// `(gate_seed, layer)`; the result is the mean over `gate_seeds`. With
/// `rescaled` the surviving residual branches are multiplied by `1/theta`
/// (whether calibration belongs in lesioned evaluation is left open, so
/// callers report both variants).
#[allow(clippy::too_many_arguments)]
pub fn lesion_eval<T: Scalar>(
    weights: &ModelWeights<T>,
    corpus: &Corpus,
    theta: f64,
    batch_size: usize,
    mask_prob: f64,
    data_seed: u64,
    eval_batches: usize,
    gate_seeds: &[u64],
    rescaled: bool,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::contract(format!(
            "lesion keep ratio must be in [0, 1], got {theta}"
        )));
    }
    let layers = weights.config.layers;
    let mut total = 0.0;
    for &gate_seed in gate_seeds {
        let gates: Vec<bool> = (0..layers)
            .map(|l| keyed_bernoulli(gate_seed, &[LESION_STREAM, l as u64], theta))
            .collect();
        let scale = if rescaled && theta > 0.0 {
            1.0 / theta
        } else {
            1.0
        };
        let plan = GatePlan {
            gates,
            scales: vec![scale; layers],
        };
        let mut batch_total = 0.0;
        for k in 0..eval_batches {
            let batch = crate::train::mlm_batch(
                corpus,
                batch_size,
                weights.config.max_seq,
                mask_prob,
                data_seed,
                crate::train::Split::Validation,
                k as u64,
            )?;
            let mut tape = Tape::new();
            let bindings = forward_model(
                &mut tape,
                weights,
                &batch.tokens,
                &plan,
                &ForwardOptions::evaluation(),
            )?;
            let loss = tape.cross_entropy_masked(bindings.logits, &batch.labels, &batch.mask)?;
            batch_total += tape.value(loss).data()[0].to_f64();
        }
        total += batch_total / eval_batches as f64;
    }
    Ok(total / gate_seeds.len() as f64)
}

/// Verify the additive gradient decomposition across the block stack.
///
/// Computes the loss gradient at the input of block `layer` two ways: the
/// tape's reverse pass, and the product of the last-boundary gradient with
/// `I + J_residual`, where the residual Jacobian comes from per-column
/// central differences over the recomputed block tail. Returns the largest
/// absolute entry-wise discrepancy.
///
/// Dense Jacobians only: fails loudly when the boundary holds more than
/// `max_jacobian_cols` entries.
pub fn identity_decomposition_check<T: Scalar>(
    weights: &ModelWeights<T>,
    layer: usize,
    batch: &MlmBatch,
    max_jacobian_cols: usize,
) -> Result<f64> {
    if !weights.config.variant.has_final_norm() {
        return Err(Error::contract(
            "identity decomposition applies to identity-path (PreLN/ST) variants only",
        ));
    }
    let layers = weights.config.layers;
    if layer >= layers {
        return Err(Error::contract(format!(
            "layer {layer} out of range for {layers} blocks"
        )));
    }

    // Route one: reverse-mode gradients at both boundaries.
    let mut tape = Tape::new();
    let (bindings, loss) = forward_with_loss(&mut tape, weights, batch)?;
    tape.backward(loss)?;
    let a_node = bindings.boundaries[layer];
    let b_node = bindings.boundaries[layers];
    let g_a = tape
        .grad(a_node)
        .expect("boundary gradients are retained")
        .cast::<f64>();
    let g_b = tape
        .grad(b_node)
        .expect("boundary gradients are retained")
        .cast::<f64>();
    let a_value = tape.value(a_node).clone();
    let n = a_value.numel();
    if n > max_jacobian_cols {
        return Err(Error::contract(format!(
            "boundary has {n} entries; dense Jacobian limited to {max_jacobian_cols}"
        )));
    }

    // Route two: J = d(tail)/d(input) by central differences, then
    // g_a_check = g_b . (I + J_residual) = g_b . dtail/dinput.
    let tail_value = |x: &crate::tensor::Tensor<T>| -> Vec<f64> {
        let mut t = Tape::new();
        let out = forward_blocks_from(
            &mut t,
            weights,
            x.clone(),
            layer,
            bindings.batch,
            bindings.seq,
        )
        .expect("tail forward on valid dims");
        t.value(out).data().iter().map(|v| v.to_f64()).collect()
    };
    let h = DECOMP_FD_STEP;
    let mut check = vec![0.0_f64; n];
    let mut x = a_value.clone();
    for (j, slot) in check.iter_mut().enumerate() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + T::from_f64(h);
        let up = tail_value(&x);
        x.data_mut()[j] = orig - T::from_f64(h);
        let down = tail_value(&x);
        x.data_mut()[j] = orig;
        // Column j of dtail/dinput, dotted against g_b on the fly.
        let mut acc = 0.0;
        for i in 0..n {
            acc += g_b.data()[i] * (up[i] - down[i]) / (2.0 * h);
        }
        *slot = acc;
    }

    let mut max_abs = 0.0_f64;
    for (ga, chk) in g_a.data().iter().zip(&check) {
        max_abs = max_abs.max((ga - chk).abs());
    }
    Ok(max_abs)
}

/// max/min spread of per-layer norms (the comparative statistic for
/// gradient-norm profiles).
pub fn spread(norms: &[f64]) -> f64 {
    let max = norms.iter().cloned().fold(f64::MIN, f64::max);
    let min = norms.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

/// Mean |log r| over the defined ratios; how far a profile sits from the
/// norm-preserving ideal of 1.
pub fn mean_abs_log_ratio(ratios: &[(f64, f64, Option<f64>)]) -> f64 {
    let logs: Vec<f64> = ratios
        .iter()
        .filter_map(|(_, _, r)| r.map(|v| v.ln().abs()))
        .collect();
    logs.iter().sum::<f64>() / logs.len() as f64
}

/// Assemble the full per-layer profile table (one backward pass plus the
/// forward-only similarity metrics).
pub fn layer_profiles<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &MlmBatch,
) -> Result<Vec<LayerProfile>> {
    let grad_norms = layer_grad_norms(weights, batch)?;
    let ratios = norm_preserving_ratios(weights, batch)?;
    let sims = io_similarity(weights, batch)?;
    let residuals = if weights.config.variant.has_final_norm() {
        residual_mean(weights, batch)?
    } else {
        vec![(f64::NAN, f64::NAN); weights.config.layers]
    };
    Ok((0..weights.config.layers)
        .map(|l| LayerProfile {
            layer: l,
            weight_grad_norm: grad_norms[l],
            input_grad_norm: ratios[l].0,
            output_grad_norm: ratios[l].1,
            norm_preserving_ratio: ratios[l].2,
            l2_distance: sims[l].0,
            arccos_deg: sims[l].1,
            residual_mean_norm: residuals[l].0,
            residual_mean_relative: residuals[l].1,
        })
        .collect())
}

/// Standard full-depth evaluation re-exported for lesioning comparisons
/// (`lesion_eval` with `theta = 1` must agree with this bitwise).
pub fn standard_eval<T: Scalar>(
    weights: &ModelWeights<T>,
    corpus: &Corpus,
    batch_size: usize,
    mask_prob: f64,
    data_seed: u64,
    eval_batches: usize,
) -> Result<f64> {
    evaluate(
        weights,
        corpus,
        batch_size,
        mask_prob,
        data_seed,
        eval_batches,
    )
}
