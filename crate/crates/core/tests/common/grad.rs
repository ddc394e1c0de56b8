use latmem::autograd::{attention_mask, MemoryVisibility};
use latmem::backbone::Backbone;
use latmem::memory::{Adapter, MemoryState, Method, ReadHooks};
use latmem::{Graph, Tensor, Var};

use super::{random_state, rel_err, rng, scramble, tiny_adapter, tiny_backbone};

const STEP: f64 = 1e-6;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// One op under test: its inputs and how to wire them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

fn eval_case(case: &OpCase, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let out = (case.build)(&mut g, &vars);
    let loss = weighted_sum(&mut g, out, weights);
    g.value(loss).data()[0]
}

/// Largest norm-wise relative error over the op's inputs, with the
/// analytic gradient norms for a non-vacuity check.
pub fn check_op(case: &OpCase, seed: u64) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars);
    let weights = Tensor::randn(g.value(out).shape(), 1.0, &mut rng(seed));
    let loss = weighted_sum(&mut g, out, &weights);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    let mut norms = Vec::new();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .leaf(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = case.inputs.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = case.inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = eval_case(case, &probe, &weights);
            probe[i].data_mut()[j] = x - STEP;
            let down = eval_case(case, &probe, &weights);
            probe[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        norms.push(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    (worst, norms)
}

pub fn op_cases() -> Vec<OpCase> {
    let mut r = rng(11);
    let mut m = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let (a34, b45, c43, d34, e34) = (m(&[3, 4]), m(&[4, 5]), m(&[5, 4]), m(&[3, 4]), m(&[3, 4]));
    let bias = m(&[4]);
    let s = m(&[1]);
    let gain = m(&[4]);
    let shift = m(&[4]);
    let table = m(&[6, 4]);
    let logits = m(&[3, 6]);
    let (q, k, v) = (m(&[3, 4]), m(&[5, 4]), m(&[5, 6]));
    let (q2, k2, v2) = (m(&[3, 4]), m(&[5, 4]), m(&[5, 6]));
    let (q3, k3, v3) = (m(&[3, 4]), m(&[3, 4]), m(&[3, 6]));
    let case = |name, inputs: Vec<Tensor<f64>>, build: Box<Build>| OpCase { name, inputs, build };
    vec![
        case("matmul", vec![a34.clone(), b45], Box::new(|g, x| g.matmul(x[0], x[1]).unwrap())),
        case("matmul_nt", vec![a34.clone(), c43.clone()], Box::new(|g, x| g.matmul_nt(x[0], x[1]).unwrap())),
        case("add", vec![a34.clone(), d34.clone()], Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
        case("mul", vec![a34.clone(), e34.clone()], Box::new(|g, x| g.mul(x[0], x[1]).unwrap())),
        case("add_row_bias", vec![a34.clone(), bias], Box::new(|g, x| g.add_row_bias(x[0], x[1]).unwrap())),
        case("scale", vec![a34.clone()], Box::new(|g, x| g.scale(x[0], -1.7).unwrap())),
        case("scale_by", vec![a34.clone(), s], Box::new(|g, x| g.scale_by(x[0], x[1]).unwrap())),
        case("softmax_rows", vec![a34.clone()], Box::new(|g, x| g.softmax_rows(x[0]).unwrap())),
        case(
            "layer_norm",
            vec![a34.clone(), gain, shift],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2]).unwrap()),
        ),
        case("gelu", vec![a34.clone()], Box::new(|g, x| g.gelu(x[0]).unwrap())),
        case("sigmoid", vec![a34.clone()], Box::new(|g, x| g.sigmoid(x[0]).unwrap())),
        case(
            "cross_entropy",
            vec![logits],
            Box::new(|g, x| g.cross_entropy(x[0], &[1, 5, 0]).unwrap()),
        ),
        case("concat_rows", vec![a34.clone(), c43], Box::new(|g, x| g.concat_rows(x[0], x[1]).unwrap())),
        case("concat_cols", vec![a34.clone(), d34], Box::new(|g, x| g.concat_cols(x[0], x[1]).unwrap())),
        case("gather_rows", vec![table], Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 5]).unwrap())),
        case("sum", vec![a34.clone()], Box::new(|g, x| g.sum(x[0]).unwrap())),
        case("mean", vec![a34.clone()], Box::new(|g, x| g.mean(x[0]).unwrap())),
        case(
            "attention_open_prefix",
            vec![q, k, v],
            Box::new(|g, x| {
                let mask = attention_mask::<f64>(3, Some((2, MemoryVisibility::Open)));
                g.attention(x[0], x[1], x[2], &mask, 2).unwrap()
            }),
        ),
        case(
            "attention_causal_prefix",
            vec![q2, k2, v2],
            Box::new(|g, x| {
                let mask = attention_mask::<f64>(3, Some((2, MemoryVisibility::Causal)));
                g.attention(x[0], x[1], x[2], &mask, 2).unwrap()
            }),
        ),
        case(
            "attention_plain",
            vec![q3, k3, v3],
            Box::new(|g, x| {
                let mask = attention_mask::<f64>(3, None);
                g.attention(x[0], x[1], x[2], &mask, 1).unwrap()
            }),
        ),
    ]
}

pub const TOKENS: [usize; 6] = [4, 9, 5, 13, 7, 11];
const TARGETS: [usize; 6] = [9, 5, 13, 7, 11, 6];

fn read_loss(model: &Backbone<f64>, adapter: &Adapter<f64>, state: &MemoryState<f64>) -> f64 {
    let mut g = Graph::no_grad();
    let mut hooks = ReadHooks::new(adapter, state).unwrap();
    let pass = model.forward(&mut g, &TOKENS, Some(&mut hooks)).unwrap();
    let loss = g.cross_entropy(pass.logits, &TARGETS).unwrap();
    g.value(loss).data()[0]
}

/// Per-parameter result of a read-path check.
pub struct ParamCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub has_grad: bool,
}

/// Finite-difference check of every adapter parameter through one method's
/// full read path, from memory injection to the language-model loss.
pub fn check_read_path(method: Method) -> Vec<ParamCheck> {
    let model = tiny_backbone(5);
    let mut adapter = tiny_adapter(method, 6);
    scramble(&mut adapter, 7);
    let state = random_state(&adapter, 8);

    let mut g = Graph::new();
    let mut hooks = ReadHooks::new(&adapter, &state).unwrap();
    let pass = model.forward(&mut g, &TOKENS, Some(&mut hooks)).unwrap();
    let loss = g.cross_entropy(pass.logits, &TARGETS).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut out = Vec::new();
    let names: Vec<String> = adapter.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let p = adapter.param(&name).unwrap();
        let grad = grads.param(p.id()).map(|t| t.data().to_vec());
        let has_grad = grad.is_some();
        let analytic = grad.unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let original = p.value.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut nudge = |delta: f64| {
                let param = adapter.params_mut().iter_mut().find(|q| q.name == name).unwrap();
                param.value.data_mut()[j] = original.data()[j] + delta;
                let v = read_loss(&model, &adapter, &state);
                let param = adapter.params_mut().iter_mut().find(|q| q.name == name).unwrap();
                param.value.data_mut()[j] = original.data()[j];
                v
            };
            *slot = (nudge(STEP) - nudge(-STEP)) / (2.0 * STEP);
        }
        out.push(ParamCheck {
            rel_err: rel_err(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
            name,
            has_grad,
        });
    }
    // frozen backbone receives nothing
    for p in model.params().iter() {
        assert!(grads.param(p.id()).is_none(), "frozen {} got a gradient", p.name);
    }
    out
}
