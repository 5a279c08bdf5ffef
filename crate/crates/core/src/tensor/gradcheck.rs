//! Randomized small graphs for checking analytic gradients against central
//! finite differences. The finite-difference side only ever runs the
//! forward pass, so it shares no code with the backward rules.

use super::{Graph, Result, Scalar, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Mlp,
    Attention,
    LayerNormCrossEntropy,
    EmbedSliceConcat,
}

const KINDS: [Kind; 4] = [Kind::Mlp, Kind::Attention, Kind::LayerNormCrossEntropy, Kind::EmbedSliceConcat];

/// One random graph: its shape, parameter values and fixed inputs.
pub struct Case {
    pub kind: Kind,
    rows: usize,
    d: usize,
    params: Vec<(Vec<usize>, Vec<f64>)>,
    weights: Vec<f64>,
    ids: Vec<usize>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

/// Deterministic in `seed`; the kind cycles with `seed`.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = KINDS[seed as usize % KINDS.len()];
    let rows = rng.gen_range(2..=5);
    let d = 2 * rng.gen_range(2..=4); // even, 4..=8
    let hidden = rng.gen_range(2..=8);
    let mut gen = |shape: Vec<usize>, scale: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        (shape, data)
    };
    let params = match kind {
        Kind::Mlp => {
            vec![gen(vec![rows, d], 1.0), gen(vec![d, hidden], 0.7), gen(vec![hidden], 0.3), gen(vec![hidden, d], 0.7)]
        }
        Kind::Attention => vec![
            gen(vec![rows, d], 1.0),
            gen(vec![d, d], 0.6),
            gen(vec![d, d], 0.6),
            gen(vec![d, d], 0.6),
            gen(vec![d], 0.5),
            gen(vec![d], 0.2),
        ],
        Kind::LayerNormCrossEntropy => {
            vec![gen(vec![rows, d], 1.5), gen(vec![d], 1.0), gen(vec![d], 0.3), gen(vec![d, hidden], 0.8)]
        }
        Kind::EmbedSliceConcat => vec![gen(vec![hidden, d], 1.0), gen(vec![d, d], 0.8)],
    };
    let weights_len = match kind {
        Kind::Mlp | Kind::Attention | Kind::EmbedSliceConcat => rows * d,
        Kind::LayerNormCrossEntropy => 0,
    };
    let weights = (0..weights_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ids = (0..rows).map(|_| rng.gen_range(0..hidden)).collect();
    let targets = (0..rows).map(|_| rng.gen_range(0..hidden)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    Case { kind, rows, d, params, weights, ids, targets, mask }
}

fn to_tensors<F: Scalar>(case: &Case) -> Result<Vec<Tensor<F>>> {
    case.params
        .iter()
        .map(|(shape, data)| {
            let mut t = Tensor::new(shape.clone(), data.iter().map(|&v| F::from_f64(v)).collect())?;
            t.set_requires_grad(true);
            Ok(t)
        })
        .collect()
}

fn weighted_sum<F: Scalar>(g: &mut Graph<F>, x: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(shape, weights.iter().map(|&v| F::from_f64(v)).collect())?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Builds the loss for `case` and returns it with the parameter handles.
fn build<F: Scalar>(g: &mut Graph<F>, case: &Case, params: &[Tensor<F>]) -> Result<(Var, Vec<Var>)> {
    let vars = params.iter().map(|p| g.leaf(p)).collect::<Result<Vec<Var>>>()?;
    let loss = match case.kind {
        Kind::Mlp => {
            let h = g.matmul(vars[0], vars[1])?;
            let h = g.add_row(h, vars[2])?;
            let h = g.gelu(h)?;
            let out = g.matmul(h, vars[3])?;
            weighted_sum(g, out, &case.weights)?
        }
        Kind::Attention => {
            let x = vars[0];
            let q = g.matmul_t(x, vars[1])?;
            let k = g.matmul_t(x, vars[2])?;
            let v = g.matmul_t(x, vars[3])?;
            let half = case.d / 2;
            let mut heads = Vec::new();
            for h in 0..2 {
                let qh = g.slice_cols(q, h * half, half)?;
                let kh = g.slice_cols(k, h * half, half)?;
                let vh = g.slice_cols(v, h * half, half)?;
                let s = g.matmul_t(qh, kh)?;
                let s = g.scale(s, F::from_f64(1.0 / (half as f64).sqrt()))?;
                let p = g.causal_softmax(s)?;
                heads.push(g.matmul(p, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let res = g.add(cat, x)?;
            let ln = g.layer_norm(res, vars[4], vars[5], F::from_f64(1e-5))?;
            weighted_sum(g, ln, &case.weights)?
        }
        Kind::LayerNormCrossEntropy => {
            let ln = g.layer_norm(vars[0], vars[1], vars[2], F::from_f64(1e-5))?;
            let logits = g.matmul(ln, vars[3])?;
            let sm = g.softmax_rows(logits)?;
            let mixed = g.add(logits, sm)?;
            g.cross_entropy(mixed, &case.targets, &case.mask)?
        }
        Kind::EmbedSliceConcat => {
            let e = g.gather_rows(vars[0], &case.ids)?;
            let h = g.matmul(e, vars[1])?;
            let half = case.d / 2;
            let left = g.slice_cols(h, 0, half)?;
            let right = g.slice_cols(h, half, case.d - half)?;
            let swapped = g.concat_cols(&[right, left])?;
            let last = g.slice_rows(swapped, case.rows - 1, 1)?;
            let act = g.gelu(swapped)?;
            let sq = g.mul(act, act)?;
            let s1 = weighted_sum(g, sq, &case.weights)?;
            let s2 = g.sum(last)?;
            g.add(s1, s2)?
        }
    };
    Ok((loss, vars))
}

fn loss_value<F: Scalar>(case: &Case, params: &[Tensor<F>]) -> Result<F> {
    let mut g = Graph::inference();
    let (loss, _) = build(&mut g, case, params)?;
    Ok(g.scalar(loss))
}

/// Worst relative error over every parameter element of one case, with the
/// analytic gradient computed in `A` and the finite differences in `N`.
/// Relative error is |a - n| / max(|a|, |n|, floor) so gradients that
/// vanish on both sides do not divide by zero.
pub fn check_case<A: Scalar, N: Scalar>(case: &Case, step: f64, floor: f64) -> Result<f64> {
    let params = to_tensors::<A>(case)?;
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, case, &params)?;
    g.backward(loss)?;
    let probe = to_tensors::<N>(case)?;
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let grad = g.grad(*var).ok_or_else(|| TensorError::Usage(format!("parameter {pi} received no gradient")))?;
        let analytic: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = probe.clone();
            let mut minus = probe.clone();
            let orig = probe[pi].data()[j];
            plus[pi].data_mut()[j] = orig + N::from_f64(step);
            minus[pi].data_mut()[j] = orig - N::from_f64(step);
            // the actually-applied perturbation, after rounding
            let span = (plus[pi].data()[j] - minus[pi].data()[j]).as_f64();
            let numeric = (loss_value(case, &plus)? - loss_value(case, &minus)?).as_f64() / span;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
