//! Finite-difference checks over every differentiable op, the losses and
//! the full training objective.

use mois_core::model::{Model, ModelConfig};
use mois_core::tensor::gradcheck::{self, GradCheck};
use mois_core::tensor::{attention, Graph, Rope, RopeTable, Tensor, TensorError, Unary, Var, ROPE_BASE};
use mois_core::training::loss::{bce, dice, focal, instance_loss, iou, semantic_loss};
use mois_core::training::{sample_loss, StepOptions, TrainingSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
/// The full objective is O(10), so a larger step keeps rounding noise in
/// the central difference well under the absolute floor.
pub const COMPOSITE_H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn binary_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_bool(0.4) as u8 as f64)
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.constant(rand_t(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, f: OpFn) -> (String, Vec<Tensor<f64>>, OpFn) {
    (name.to_string(), inputs, f)
}

pub fn op_cases() -> Vec<(String, Vec<Tensor<f64>>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut v = Vec::new();
    v.push(case("add_broadcast", vec![rand_t(&[3, 4], -1., 1., r), rand_t(&[1, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.add(x[0], x[1])?;
        weighted_sum(g, y)
    })));
    v.push(case("sub", vec![rand_t(&[3, 4], -1., 1., r), rand_t(&[3, 1], -1., 1., r)], Box::new(|g, x| {
        let y = g.sub(x[0], x[1])?;
        weighted_sum(g, y)
    })));
    v.push(case("mul", vec![rand_t(&[3, 4], -1., 1., r), rand_t(&[3, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.mul(x[0], x[1])?;
        weighted_sum(g, y)
    })));
    v.push(case("div", vec![rand_t(&[3, 4], -1., 1., r), rand_t(&[3, 4], 0.5, 2., r)], Box::new(|g, x| {
        let y = g.div(x[0], x[1])?;
        weighted_sum(g, y)
    })));
    v.push(case("scale_add_scalar_one_minus", vec![rand_t(&[5], -1., 1., r)], Box::new(|g, x| {
        let y = g.scale(x[0], 1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.one_minus(y);
        weighted_sum(g, y)
    })));
    let unaries = [
        ("exp", Unary::Exp, -1.0, 1.0),
        ("ln", Unary::Ln, 0.5, 2.0),
        ("sigmoid", Unary::Sigmoid, -3.0, 3.0),
        ("relu", Unary::Relu, 0.1, 1.0),
        ("relu_negative", Unary::Relu, -1.0, -0.1),
        ("gelu", Unary::Gelu, -3.0, 3.0),
        ("softplus", Unary::Softplus, -3.0, 3.0),
        ("tanh", Unary::Tanh, -2.0, 2.0),
        ("square", Unary::Square, -2.0, 2.0),
        ("sqrt", Unary::Sqrt, 0.5, 2.0),
    ];
    for (name, kind, lo, hi) in unaries {
        v.push(case(name, vec![rand_t(&[2, 5], lo, hi, r)], Box::new(move |g, x| {
            let y = g.unary(kind, x[0]);
            weighted_sum(g, y)
        })));
    }
    v.push(case("matmul", vec![rand_t(&[3, 5], -1., 1., r), rand_t(&[5, 2], -1., 1., r)], Box::new(|g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted_sum(g, y)
    })));
    v.push(case("transpose", vec![rand_t(&[3, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.transpose(x[0])?;
        weighted_sum(g, y)
    })));
    v.push(case("reshape", vec![rand_t(&[3, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.reshape(x[0], &[2, 6])?;
        weighted_sum(g, y)
    })));
    v.push(case("broadcast_to", vec![rand_t(&[1, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.broadcast_to(x[0], &[3, 4])?;
        weighted_sum(g, y)
    })));
    v.push(case("narrow", vec![rand_t(&[4, 5], -1., 1., r)], Box::new(|g, x| {
        let y = g.narrow(x[0], 1, 1, 3)?;
        weighted_sum(g, y)
    })));
    v.push(case("concat", vec![rand_t(&[2, 3], -1., 1., r), rand_t(&[4, 3], -1., 1., r)], Box::new(|g, x| {
        let y = g.concat(&[x[0], x[1]], 0)?;
        weighted_sum(g, y)
    })));
    v.push(case("sum_mean", vec![rand_t(&[3, 3], -1., 1., r)], Box::new(|g, x| {
        let sq = g.square(x[0]);
        let a = g.sum(sq);
        let b = g.mean(x[0]);
        g.add(a, b)
    })));
    v.push(case("sum_axis", vec![rand_t(&[2, 3, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.sum_axis(x[0], 1)?;
        weighted_sum(g, y)
    })));
    v.push(case("softmax", vec![rand_t(&[3, 5], -2., 2., r)], Box::new(|g, x| {
        let y = g.softmax(x[0]);
        weighted_sum(g, y)
    })));
    v.push(case("layer_norm", vec![rand_t(&[3, 6], -2., 2., r)], Box::new(|g, x| {
        let y = g.layer_norm(x[0], 1e-5);
        weighted_sum(g, y)
    })));
    v.push(case("conv2d_pad", vec![rand_t(&[2, 5, 5], -1., 1., r), rand_t(&[3, 2, 3, 3], -1., 1., r)], Box::new(|g, x| {
        let y = g.conv2d(x[0], x[1], 1, 1)?;
        weighted_sum(g, y)
    })));
    v.push(case("conv2d_stride", vec![rand_t(&[2, 6, 6], -1., 1., r), rand_t(&[2, 2, 2, 2], -1., 1., r)], Box::new(|g, x| {
        let y = g.conv2d(x[0], x[1], 2, 0)?;
        weighted_sum(g, y)
    })));
    v.push(case("resize_up", vec![rand_t(&[2, 3, 4], -1., 1., r)], Box::new(|g, x| {
        let y = g.resize_bilinear(x[0], 7, 5)?;
        weighted_sum(g, y)
    })));
    v.push(case("resize_down", vec![rand_t(&[1, 8, 6], -1., 1., r)], Box::new(|g, x| {
        let y = g.resize_bilinear(x[0], 3, 4)?;
        weighted_sum(g, y)
    })));
    v.push(case("rotate_pairs", vec![rand_t(&[3, 4], -1., 1., r)], Box::new(|g, x| {
        let cos: Vec<f64> = (0..6).map(|i| (0.3 * i as f64).cos()).collect();
        let sin: Vec<f64> = (0..6).map(|i| (0.3 * i as f64).sin()).collect();
        let y = g.rotate_pairs(x[0], cos, sin)?;
        weighted_sum(g, y)
    })));
    v.push(case(
        "attention_rope",
        vec![rand_t(&[3, 8], -1., 1., r), rand_t(&[4, 8], -1., 1., r), rand_t(&[4, 8], -1., 1., r)],
        Box::new(|g, x| {
            let rq = RopeTable::<f64>::new(&[[0.0, 1.0], [2.0, 0.5], [1.0, 3.0]], 4, ROPE_BASE)?;
            let rk = RopeTable::<f64>::new(&[[1.0, 1.0], [0.0, 0.0], [3.0, 2.0], [4.0, 1.0]], 4, ROPE_BASE)?;
            let y = attention(g, x[0], x[1], x[2], 2, Some(Rope { q: &rq, k: &rk }))?;
            weighted_sum(g, y)
        }),
    ));
    let logits = rand_t(&[6, 6], -3., 3., r);
    let target = binary_t(&[6, 6], r);
    type LossFn = fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>;
    let losses: [(&str, LossFn); 5] = [
        ("loss_bce", bce),
        ("loss_focal", focal),
        ("loss_dice", dice),
        ("loss_iou", iou),
        ("loss_semantic", semantic_loss),
    ];
    for (name, f) in losses {
        let t = target.clone();
        v.push(case(name, vec![logits.clone()], Box::new(move |g, x| {
            let tv = g.constant(t.clone());
            f(g, x[0], tv)
        })));
    }
    let t = target.clone();
    v.push(case("loss_instance", vec![logits.clone(), rand_t(&[1, 1], 0., 1., r)], Box::new(move |g, x| {
        let tv = g.constant(t.clone());
        instance_loss(g, x[0], x[1], tv)
    })));
    v
}

pub fn run_ops() -> Vec<(String, GradCheck)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = gradcheck::check(|g, v| f(g, v), &inputs, H).expect("op evaluates");
            (name, r)
        })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 8,
        channels: 8,
        heads: 1,
        encoder_blocks: 1,
        decoder_layers: 1,
        attention_layers: 1,
        fine_channels: 4,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn disk(side: usize, cx: f64, cy: f64, r: f64) -> Vec<u8> {
    (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() <= r) as u8
        })
        .collect()
}

/// Three-slice sample with one prompted lesion and one unprompted one.
pub fn tiny_sample(side: usize) -> TrainingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lesion: Vec<Vec<u8>> = vec![disk(side, 4.0, 5.0, 3.0), disk(side, 4.5, 5.0, 3.5), disk(side, 5.0, 5.0, 2.0)];
    let other: Vec<Vec<u8>> = vec![vec![0; side * side], disk(side, 11.0, 11.0, 2.5), disk(side, 11.0, 11.0, 2.0)];
    let slices = (0..3)
        .map(|z| {
            (0..side * side)
                .map(|i| {
                    let fg = lesion[z][i] | other[z][i];
                    0.2 + 0.6 * fg as f32 + rng.random_range(-0.05..0.05)
                })
                .collect()
        })
        .collect();
    let semantic = (0..3).map(|z| lesion[z].iter().zip(&other[z]).map(|(a, b)| a | b).collect()).collect();
    TrainingSample {
        side,
        slices,
        prompted: vec![lesion],
        semantic,
    }
}

/// Analytic and central-difference partials of the full objective for up
/// to `per_tensor` entries of every parameter tensor.
pub fn composite_loss_partials(teacher_forcing: bool, per_tensor: usize) -> Vec<(String, usize, f64, f64)> {
    let model = Model::<f64>::new(tiny_config(), 3).expect("valid config");
    let sample = tiny_sample(16);
    let opts = StepOptions {
        teacher_forcing,
        max_corrections: 0,
    };
    let loss_of = |m: &Model<f64>, track: bool| {
        let mut g = if track { Graph::new() } else { Graph::inference() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lv = sample_loss(m, &mut g, &sample, opts, &mut rng).expect("loss");
        (g, lv.total)
    };
    let (g, loss) = loss_of(&model, true);
    let grads = g.backward(loss).expect("scalar loss");
    let mut out = Vec::new();
    let mut work = model.clone();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()));
        let m = per_tensor.min(n);
        for k in (0..m).map(|j| j * n / m) {
            let orig = model.params.get(id).data()[k];
            work.params.get_mut(id).data_mut()[k] = orig + COMPOSITE_H;
            let (gu, lu) = loss_of(&work, false);
            let up = gu.value(lu).item();
            work.params.get_mut(id).data_mut()[k] = orig - COMPOSITE_H;
            let (gd, ld) = loss_of(&work, false);
            let down = gd.value(ld).item();
            work.params.get_mut(id).data_mut()[k] = orig;
            out.push((model.params.name(id).to_string(), k, analytic.data()[k], (up - down) / (2.0 * COMPOSITE_H)));
        }
    }
    out
}

pub fn summarize(partials: &[(String, usize, f64, f64)]) -> GradCheck {
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: partials.len(),
    };
    for (_, _, a, n) in partials {
        let abs = (a - n).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        if abs >= gradcheck::ABS_TOL {
            report.max_rel_err = report.max_rel_err.max(abs / a.abs().max(n.abs()).max(gradcheck::REL_FLOOR));
        }
    }
    report
}

pub fn composite_loss_check(teacher_forcing: bool, per_tensor: usize) -> GradCheck {
    summarize(&composite_loss_partials(teacher_forcing, per_tensor))
}
