//! Central finite-difference gradient checks at `f64`.
//!
//! The relative error of one input is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, SCALE_FLOOR)`.
//! The floor keeps structurally zero gradients (for example a key bias under
//! softmax) from turning roundoff into a relative error of one.
//! where `a` is the analytic gradient and `n` the numerical one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(SCALE_FLOOR, f64::max);
    diff / scale
}

/// Checks every input of `f` against central differences with step `h`.
///
/// The output of `f` is contracted with a fixed random tensor so that the
/// upstream gradient is not uniform.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let n: usize = probe_shape.iter().product();
    let weights = Tensor::new(probe_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let mut grads = Vec::new();
        if grad {
            tape.backward(loss)?;
            for (v, t) in vars.iter().zip(inputs) {
                grads.push(tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + STEP;
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[e] = orig - STEP;
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic[k], &numeric));
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, tolerance, passed: worst < tolerance })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Gradient checks for every differentiable tape op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();

    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], 1.0);
    out.push(check("matmul", &[a.clone(), b], seed, tol, |t, v| t.matmul(v[0], v[1]))?);

    let bt = rand_tensor(&mut rng, &[5, 4], 1.0);
    out.push(check("matmul_t", &[a.clone(), bt], seed, tol, |t, v| t.matmul_t(v[0], v[1]))?);
    out.push(check("transpose", std::slice::from_ref(&a), seed, tol, |t, v| t.transpose(v[0]))?);

    let row = rand_tensor(&mut rng, &[1, 4], 1.0);
    out.push(check("add_broadcast", &[a.clone(), row.clone()], seed, tol, |t, v| t.add(v[0], v[1]))?);
    out.push(check("sub_broadcast", &[a.clone(), row.clone()], seed, tol, |t, v| t.sub(v[0], v[1]))?);
    out.push(check("mul_broadcast", &[a.clone(), row], seed, tol, |t, v| t.mul(v[0], v[1]))?);
    let same = rand_tensor(&mut rng, &[3, 4], 1.0);
    out.push(check("mul", &[a.clone(), same.clone()], seed, tol, |t, v| t.mul(v[0], v[1]))?);
    out.push(check("scale", std::slice::from_ref(&a), seed, tol, |t, v| Ok(t.scale(v[0], 0.37)))?);

    let s3 = rand_tensor(&mut rng, &[2, 3, 4], 2.0);
    for axis in 0..3 {
        out.push(check(&format!("softmax_axis{axis}"), std::slice::from_ref(&s3), seed, tol, move |t, v| {
            t.softmax(v[0], axis)
        })?);
    }
    out.push(check("layer_norm", &[rand_tensor(&mut rng, &[3, 6], 2.0)], seed, tol, |t, v| t.layer_norm(v[0], 1e-5))?);
    out.push(check("gelu", &[rand_tensor(&mut rng, &[10], 3.0)], seed, tol, |t, v| Ok(t.gelu(v[0])))?);

    let x = rand_tensor(&mut rng, &[2, 5, 5], 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
    let cb = rand_tensor(&mut rng, &[3], 1.0);
    out.push(check("conv2d_s1_p1", &[x.clone(), w.clone(), cb.clone()], seed, tol, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })?);
    out.push(check("conv2d_s2_p0", &[x.clone(), w], seed, tol, |t, v| t.conv2d(v[0], v[1], None, 2, 0))?);
    out.push(check("adaptive_avg_pool_1x1", std::slice::from_ref(&x), seed, tol, |t, v| {
        t.adaptive_avg_pool(v[0], 1, 1)
    })?);
    out.push(check("adaptive_avg_pool_2x3", &[x], seed, tol, |t, v| t.adaptive_avg_pool(v[0], 2, 3))?);

    let rows = rand_tensor(&mut rng, &[4, 3], 1.0);
    out.push(check("index_select", std::slice::from_ref(&rows), seed, tol, |t, v| {
        t.index_select(v[0], &[2, 0, 2, 3])
    })?);
    out.push(check("gather", std::slice::from_ref(&rows), seed, tol, |t, v| {
        t.gather(v[0], &[11, 0, 5, 5, 7, 1], &[2, 3])
    })?);
    out.push(check("concat_rows", &[rows.clone(), same.clone()], seed, tol, |t, v| {
        let a = t.slice_rows(v[1], 0, 2)?;
        let b = t.reshape(a, &[2, 4])?;
        let c = t.slice_cols(b, 0, 3)?;
        t.concat_rows(&[v[0], c])
    })?);
    out.push(check("slice_rows", std::slice::from_ref(&rows), seed, tol, |t, v| t.slice_rows(v[0], 1, 3))?);
    out.push(check("concat_cols", &[rows.clone(), a.clone()], seed, tol, |t, v| {
        let top = t.slice_rows(v[1], 0, 3)?;
        let r = t.slice_rows(v[0], 0, 3)?;
        t.concat_cols(&[r, top])
    })?);
    out.push(check("slice_cols", std::slice::from_ref(&a), seed, tol, |t, v| t.slice_cols(v[0], 1, 3))?);
    out.push(check("reshape", std::slice::from_ref(&a), seed, tol, |t, v| t.reshape(v[0], &[2, 6]))?);
    out.push(check("row_select", &[a.clone(), same.clone()], seed, tol, |t, v| {
        t.row_select(v[0], v[1], &[true, false, true])
    })?);
    out.push(check("sum", std::slice::from_ref(&a), seed, tol, |t, v| Ok(t.sum(v[0])))?);
    out.push(check("mse", &[a.clone(), same], seed, tol, |t, v| t.mse(v[0], v[1]))?);
    out.push(check("cross_entropy", &[rand_tensor(&mut rng, &[4], 2.0)], seed, tol, |t, v| t.cross_entropy(v[0], 2))?);
    Ok(out)
}

/// End-to-end check of the full training loss on the tiny model (D=8, one
/// encoder and one decoder block, four patches), with every parameter,
/// including the zero-initialized adaLN maps, re-drawn at random so no
/// path is gated off.
pub fn tiny_model_check(seed: u64) -> Result<GradCheckReport> {
    use crate::loss::combined_loss;
    use crate::model::{Bound, Mltr, ModelConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mltr::<f64>::new(ModelConfig::tiny(), seed)?;
    for p in model.params_mut().iter_mut() {
        let n = p.value.numel();
        for i in 0..n {
            p.value.data_mut()[i] = rng.random_range(-0.5..0.5);
        }
    }
    let cfg = model.config().clone();
    let image = rand_tensor(&mut rng, &[cfg.channels, cfg.image_height, cfg.image_width], 1.0);
    let image = Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| (v + 1.0) / 2.0).collect())?;
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let mask_seed = seed ^ 0x5eed;
    check("tiny_model_loss", &inputs, seed, MODEL_TOLERANCE, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let out = model.forward_train(tape, &bound, &image, 0.5, &mut mask_rng)?;
        let x = tape.constant(image.clone());
        Ok(combined_loss(tape, out.logits, 2, out.recon, x, true)?.total)
    })
}
