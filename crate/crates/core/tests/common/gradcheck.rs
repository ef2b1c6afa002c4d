use mcqtok::autodiff::{Real, Tape, Tensor, Var};
use mcqtok::losses::{contrastive_loss, recon_loss, vq_loss, LossWeights};
use mcqtok::model::{
    gradients, AttentionProjection, AttentionWeights, Batch, Direction, Factorization, ParamStore,
    QuantizerKind, SupervisionPoint, TokenizerModel,
};
use mcqtok::par::Execution;
use mcqtok::Result;

use super::{normals, quantizer, random_batch, tiny_model};

pub const TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

trait Graph {
    fn build<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var>;
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric
        .iter()
        .map(|n| n * n)
        .sum::<f64>()
        .sqrt()
        .max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

/// Scalarizes non-scalar outputs with fixed random weights.
fn scalar<T: Real>(tape: &mut Tape<T>, out: Var) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = Tensor::new(shape, normals(99, n).into_iter().map(T::from_f32).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn eval64<G: Graph>(g: &G, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = g.build(&mut tape, &vars).unwrap();
    let out = scalar(&mut tape, out);
    tape.value(out).item()
}

/// Worst relative error over the inputs of `g`.
fn check<G: Graph>(shapes: &[&[usize]], g: &G) -> f64 {
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.iter().product();
            Tensor::new(
                s.to_vec(),
                normals(i as u64 + 1, n)
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            )
            .unwrap()
        })
        .collect();

    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = g.build(&mut tape, &vars).unwrap();
    let out = scalar(&mut tape, out);
    tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric.push((eval64(g, &plus) - eval64(g, &minus)) / (2.0 * STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

macro_rules! graph {
    ($out:ident, $name:literal, [$($shape:expr),*], |$t:ident, $x:ident| $body:expr) => {{
        struct G;
        impl Graph for G {
            fn build<T: Real>(&self, $t: &mut Tape<T>, $x: &[Var]) -> Result<Var> {
                $body
            }
        }
        $out.push(($name, check(&[$(&$shape),*], &G)));
    }};
}

/// Worst relative error of every differentiable primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    graph!(out, "matmul", [[3, 4], [4, 5]], |t, x| t.matmul(x[0], x[1]));
    graph!(out, "batch_matmul", [[2, 3, 4], [2, 4, 5]], |t, x| t
        .batch_matmul(x[0], x[1], false));
    graph!(out, "batch_matmul_t", [[2, 3, 4], [2, 5, 4]], |t, x| t
        .batch_matmul(x[0], x[1], true));
    graph!(out, "transpose", [[3, 5]], |t, x| t.transpose(x[0]));
    graph!(out, "add_bias", [[3, 4], [4]], |t, x| t
        .add_bias(x[0], x[1]));
    graph!(out, "add_bias_3d", [[2, 3, 4], [3, 4]], |t, x| t
        .add_bias(x[0], x[1]));
    graph!(out, "add", [[3, 4], [3, 4]], |t, x| t.add(x[0], x[1]));
    graph!(out, "sub", [[3, 4], [3, 4]], |t, x| t.sub(x[0], x[1]));
    graph!(out, "mul", [[3, 4], [3, 4]], |t, x| t.mul(x[0], x[1]));
    graph!(out, "mul_self", [[3, 4]], |t, x| t.mul(x[0], x[0]));
    graph!(out, "scale", [[3, 4]], |t, x| Ok(
        t.scale(x[0], T::from_f64(-1.7))
    ));
    graph!(out, "scale_by", [[3, 4], [1]], |t, x| t
        .scale_by(x[0], x[1]));
    graph!(out, "exp", [[3, 4]], |t, x| Ok(t.exp(x[0])));
    graph!(out, "gelu", [[3, 4]], |t, x| Ok(t.gelu(x[0])));
    graph!(out, "sigmoid", [[3, 4]], |t, x| Ok(t.sigmoid(x[0])));
    graph!(out, "softmax_rows", [[3, 5]], |t, x| Ok(
        t.softmax_rows(x[0])
    ));
    graph!(out, "softmax_rows_3d", [[2, 3, 4]], |t, x| Ok(
        t.softmax_rows(x[0])
    ));
    graph!(out, "layer_norm", [[3, 6]], |t, x| Ok(t.layer_norm(x[0])));
    graph!(out, "normalize_rows", [[3, 6]], |t, x| Ok(
        t.normalize_rows(x[0])
    ));
    graph!(out, "sum", [[3, 4]], |t, x| Ok(t.sum(x[0])));
    graph!(out, "mean", [[3, 4]], |t, x| Ok(t.mean(x[0])));
    graph!(out, "mean_pool_0", [[3, 4]], |t, x| t.mean_pool(x[0], 0));
    graph!(out, "mean_pool_1", [[2, 3, 4]], |t, x| t.mean_pool(x[0], 1));
    graph!(out, "reshape", [[2, 6]], |t, x| t.reshape(x[0], &[3, 4]));
    graph!(out, "swap_middle", [[2, 3, 2, 2]], |t, x| t
        .swap_middle(x[0]));
    graph!(out, "concat_last", [[3, 2], [3, 4]], |t, x| t
        .concat_last(&[x[0], x[1]]));
    graph!(out, "slice_last", [[3, 5]], |t, x| t.slice_last(x[0], 1, 3));
    graph!(out, "gather_rows", [[4, 3]], |t, x| t
        .gather_rows(x[0], &[2, 0, 2, 3]));
    graph!(out, "cross_entropy", [[3, 4]], |t, x| {
        let mut targets = Tensor::zeros(&[3, 4]);
        for (r, c) in [(0, 1), (1, 3), (2, 0)] {
            targets.data_mut()[r * 4 + c] = T::one();
        }
        t.cross_entropy(x[0], targets)
    });
    graph!(out, "recon_loss", [[3, 4], [3, 4]], |t, x| recon_loss(
        t, x[0], x[1]
    ));
    graph!(out, "contrastive_loss", [[6, 4]], |t, x| contrastive_loss(
        t,
        x[0],
        &[0, 1, 1, 3, 0, 2]
    ));
    graph!(
        out,
        "attention_down",
        [[6, 8], [8, 8], [8, 8], [8, 8], [4, 4]],
        |t, x| {
            let w = AttentionWeights {
                query: x[1],
                key: x[2],
                value: x[3],
                output: x[4],
            };
            AttentionProjection::new(2, 4, Direction::Down)?.forward(t, x[0], 3, &w)
        }
    );
    graph!(
        out,
        "attention_up",
        [[6, 4], [4, 8], [4, 8], [4, 8], [8, 8]],
        |t, x| {
            let w = AttentionWeights {
                query: x[1],
                key: x[2],
                value: x[3],
                output: x[4],
            };
            AttentionProjection::new(2, 4, Direction::Up)?.forward(t, x[0], 3, &w)
        }
    );
    out
}

/// Stop-gradient ops cannot be compared with finite differences; they are
/// checked against their closed-form gradients. Returns the first
/// mismatch.
pub fn stop_gradient_mismatch() -> Option<String> {
    let x = Tensor::new(vec![3, 4], normals(1, 12)).unwrap();
    let mut tape = Tape::<f32>::new();
    let v = tape.param(x.clone());
    let d = tape.detach(v);
    let p = tape.mul(d, v).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    if tape.grad(v).unwrap() != x {
        return Some("detach".into());
    }

    let (tokens, beta) = (5usize, 0.25f64);
    let f = normals(2, tokens * 4);
    let f_hat = normals(3, tokens * 4);
    for codebook_term in [false, true] {
        let mut tape = Tape::<f64>::new();
        let fv = tape
            .param(Tensor::new(vec![tokens, 4], f.iter().map(|&a| a as f64).collect()).unwrap());
        let hv = tape.param(
            Tensor::new(vec![tokens, 4], f_hat.iter().map(|&a| a as f64).collect()).unwrap(),
        );
        let loss = vq_loss(&mut tape, fv, hv, beta, codebook_term).unwrap();
        tape.backward(loss).unwrap();
        let gf = tape.grad(fv).unwrap();
        let gh = tape.grad(hv);
        for i in 0..tokens * 4 {
            let diff = f[i] as f64 - f_hat[i] as f64;
            let want_f = 2.0 * beta * diff / tokens as f64;
            let want_h = if codebook_term {
                -2.0 * diff / tokens as f64
            } else {
                0.0
            };
            let got_h = gh.as_ref().map_or(0.0, |g| g.data()[i]);
            if (gf.data()[i] - want_f).abs() > 1e-12 || (got_h - want_h).abs() > 1e-12 {
                return Some(format!("vq_loss(codebook_term={codebook_term}) at {i}"));
            }
        }
    }
    None
}

/// Whether straight_through forwards the quantized values and hands the
/// upstream gradient to its input bit for bit.
pub fn straight_through_is_exact() -> bool {
    let mut tape = Tape::<f32>::new();
    let f = tape.param(Tensor::new(vec![4, 3], normals(1, 12)).unwrap());
    let q = Tensor::new(vec![4, 3], normals(2, 12)).unwrap();
    let st = tape.straight_through(f, q.clone()).unwrap();
    let forward_ok = tape.value(st) == &q;
    let w = Tensor::new(vec![4, 3], normals(3, 12)).unwrap();
    let wv = tape.constant(w.clone());
    let p = tape.mul(st, wv).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    forward_ok && tape.grad(f).unwrap().data() == w.data()
}

fn total_loss(
    model: &TokenizerModel,
    params: &ParamStore<f64>,
    batch: &Batch,
    w: &LossWeights,
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let pass = model
        .forward(params, &mut tape, batch, w, Execution::Sequential)
        .unwrap();
    tape.value(pass.loss).item()
}

/// Relative error of up to 16 coordinates of every parameter whose name
/// passes `include`.
fn model_errors(
    model: &TokenizerModel,
    w: &LossWeights,
    include: impl Fn(&str) -> bool,
    label: &str,
) -> Vec<(String, f64)> {
    let cfg = model.config();
    let batch = random_batch(5, 6, cfg.image_size, cfg.patch_size, model.num_classes());
    let mut tape = Tape::<f32>::new();
    let pass = model
        .forward(model.params(), &mut tape, &batch, w, Execution::Sequential)
        .unwrap();
    tape.backward(pass.loss).unwrap();
    let grads = gradients(&tape, &pass.bound);
    let base: ParamStore<f64> = model.params().cast();
    let mut out = Vec::new();
    for name in model.params().names() {
        if !include(name) {
            continue;
        }
        let g = &grads[name];
        let n = g.len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..n).step_by((n / 16).max(1)) {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += STEP;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= STEP;
            numeric.push(
                (total_loss(model, &plus, &batch, w) - total_loss(model, &minus, &batch, w))
                    / (2.0 * STEP),
            );
            analytic.push(g.data()[j] as f64);
        }
        out.push((format!("{label} {name}"), rel_error(&analytic, &numeric)));
    }
    out
}

/// Full tokenizer loss against finite differences, per parameter group.
///
/// Without a quantizer every parameter is checked for each factorization
/// and supervision point. With one, only the parameters after the lookup
/// are: they see the quantized values as constants, so their gradient is
/// exact, while anything upstream gets the straight-through surrogate.
pub fn full_loss_errors() -> Vec<(String, f64)> {
    let w = LossWeights::default();
    let mut out = Vec::new();
    for fact in [
        Factorization::None,
        Factorization::Linear,
        Factorization::Attention,
    ] {
        for sup in [
            SupervisionPoint::PreFactorization,
            SupervisionPoint::PostQuantization,
        ] {
            let model = TokenizerModel::new(
                tiny_model(fact, sup),
                quantizer(QuantizerKind::None, 1, 1),
                3,
                7,
            )
            .unwrap();
            out.extend(model_errors(
                &model,
                &w,
                |_| true,
                &format!("{fact:?}/{sup:?}"),
            ));
        }
    }
    for (kind, n) in [
        (QuantizerKind::Vq, 1),
        (QuantizerKind::Mcq, 2),
        (QuantizerKind::Rq, 2),
    ] {
        let model = TokenizerModel::new(
            tiny_model(Factorization::Linear, SupervisionPoint::PostQuantization),
            quantizer(kind, n, 8),
            3,
            11,
        )
        .unwrap();
        let downstream = |name: &str| {
            ["expand.", "dec.", "tower."]
                .iter()
                .any(|p| name.starts_with(p))
        };
        out.extend(model_errors(&model, &w, downstream, &format!("{kind:?}")));
    }
    out
}
