//! Central-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::event_io::Modality;
use crate::fusion::{fuse_on_tape, Classifier, SketchPair};
use crate::layers::{Conv, Dense};
use crate::model::{netvlad, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{cls_loss, total_loss, triplet_loss};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", t.shape()),
        ));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    Ok(y)
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for
/// the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(p);
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but over every coordinate of every stored parameter.
/// Returns `(parameter name, max relative error)` in store order.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let y = f(&mut tape, s)?;
        scalar_of(&tape, y)
    };

    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in 0..store.len() {
        let param = store.get(id);
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        let mut worst = 0.0f64;
        for i in 0..param.value.len() {
            let original = param.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = original + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push((param.name.clone(), worst));
    }
    Ok(report)
}

/// Relative-error bound every layer must meet.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step used by the layer suite.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

/// Checks every parameter and the named inputs of `f`, returning the worst error.
fn check_all<F>(store: &ParamStore, inputs: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut errors = Vec::new();
    if !store.is_empty() {
        let constants: Vec<Tensor> = inputs.to_vec();
        let report = grad_check_params(
            store,
            |tape, s| {
                let vars: Vec<Var> = constants.iter().map(|t| tape.input(t.clone())).collect();
                f(tape, s, &vars)
            },
            eps,
        )?;
        errors.extend(report.into_iter().map(|(_, e)| e));
    }
    for k in 0..inputs.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { x } else { tape.input(t.clone()) })
                    .collect();
                f(tape, store, &vars)
            },
            &inputs[k],
            eps,
        )?;
        errors.push(err);
    }
    Ok(worst(errors))
}

fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_width: 8,
        input_height: 6,
        backbone_channels: vec![2, 3],
        head_dim: 3,
        clusters: 2,
        cls_channels: 2,
        cls_dim: 4,
        sketch_dim: 8,
        classifier_hidden: [4, 3],
        signed_sqrt: true,
        seed,
    }
}

/// Gradient checks of every differentiable stage, from single layers up to
/// the joint loss of a tiny end-to-end model. Biases and inputs are drawn
/// away from zero so relu and hinge kinks stay outside the difference stencil.
pub fn layer_suite(seed: u64, eps: f64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |layer: &'static str, err: f64| {
        out.push(LayerCheck {
            layer,
            max_rel_error: err,
        })
    };

    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, &mut rng, "conv", 2, 3, 3, 2, 1)?;
    let target = uniform(&mut rng, &[3, 3, 3], -1.0, 1.0);
    let x = uniform(&mut rng, &[2, 5, 6], -1.0, 1.0);
    push(
        "conv",
        check_all(
            &store,
            &[x, target],
            |t, s, v| {
                let y = conv.forward(t, s, v[0])?;
                t.distance(y, v[1])
            },
            eps,
        )?,
    );

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, &mut rng, "linear", 5, 4)?;
    let x = uniform(&mut rng, &[5], -1.0, 1.0);
    let target = uniform(&mut rng, &[4], -1.0, 1.0);
    push(
        "linear",
        check_all(
            &store,
            &[x, target],
            |t, s, v| {
                let y = dense.forward(t, s, v[0])?;
                t.distance(y, v[1])
            },
            eps,
        )?,
    );

    let (k, d, m) = (3, 4, 5);
    let inputs = [
        uniform(&mut rng, &[k, m], -2.0, 2.0),
        uniform(&mut rng, &[d, m], -1.0, 1.0),
        uniform(&mut rng, &[k, d], -1.0, 1.0),
        uniform(&mut rng, &[k * d], -0.5, 0.5),
    ];
    push(
        "netvlad",
        check_all(
            &ParamStore::new(),
            &inputs,
            |t, _, v| {
                let y = netvlad(t, v[0], v[1], v[2])?;
                t.distance(y, v[3])
            },
            eps,
        )?,
    );

    let sketches = SketchPair::new(6, 16, seed)?;
    let inputs = [
        uniform(&mut rng, &[6], -1.0, 1.0),
        uniform(&mut rng, &[6], -1.0, 1.0),
        uniform(&mut rng, &[16], -0.3, 0.3),
    ];
    let fusion = worst(
        [false, true]
            .into_iter()
            .map(|rooted| {
                check_all(
                    &ParamStore::new(),
                    &inputs,
                    |t, _, v| {
                        let y = fuse_on_tape(t, v[0], v[1], &sketches, rooted)?;
                        t.distance(y, v[2])
                    },
                    eps,
                )
            })
            .collect::<Result<Vec<_>>>()?,
    );
    push("count sketch + fft fusion", fusion);

    let mut store = ParamStore::new();
    let classifier = Classifier::new(&mut store, &mut rng, 8, [5, 4])?;
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = uniform(&mut rng, p.value.shape(), 0.05, 0.3);
    }
    let fused = uniform(&mut rng, &[8], -1.0, 1.0);
    push(
        "classifier",
        check_all(
            &store,
            &[fused],
            |t, s, v| {
                let score = classifier.forward(t, s, v[0])?;
                t.bce(score, 1.0)
            },
            eps,
        )?,
    );

    // positive farther than negative keeps the hinge active
    let anchor = uniform(&mut rng, &[6], -0.2, 0.2);
    let positive = uniform(&mut rng, &[6], 0.8, 1.2);
    let negative = uniform(&mut rng, &[6], 0.1, 0.4);
    push(
        "triplet loss",
        check_all(
            &ParamStore::new(),
            &[anchor, positive, negative],
            |t, _, v| triplet_loss(t, v[0], v[1], v[2], 0.1),
            eps,
        )?,
    );

    let scores = [
        uniform(&mut rng, &[1], 0.2, 0.8),
        uniform(&mut rng, &[1], 0.2, 0.8),
    ];
    push(
        "cls loss",
        check_all(
            &ParamStore::new(),
            &scores,
            |t, _, v| cls_loss(t, v[0], v[1]),
            eps,
        )?,
    );

    let mut model = Model::new(tiny_model_config(seed))?;
    for p in model.store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = uniform(&mut rng, p.value.shape(), 0.05, 0.3);
    }
    let frames = [
        uniform(&mut rng, &[1, 6, 8], -1.0, 1.0),
        uniform(&mut rng, &[3, 6, 8], -1.0, 1.0),
        uniform(&mut rng, &[3, 6, 8], -1.0, 1.0),
    ];
    let joint = |t: &mut Tape, m: &Model, v: &[Var]| -> Result<Var> {
        let a = m.encode(t, v[0], Modality::Event)?;
        let p = m.encode(t, v[1], Modality::Image)?;
        let n = m.encode(t, v[2], Modality::Image)?;
        // a wide margin keeps the hinge active for any random draw
        let lt = triplet_loss(t, a.retrieval, p.retrieval, n.retrieval, 3.0)?;
        let s_ap = m.similarity(t, a.cls, p.cls)?;
        let s_an = m.similarity(t, a.cls, n.cls)?;
        let lc = cls_loss(t, s_ap, s_an)?;
        total_loss(t, lt, lc)
    };
    push(
        "total loss (tiny model)",
        check_all(
            &model.store,
            &frames,
            |t, s, v| {
                let mut m = model.clone();
                m.store = s.clone();
                joint(t, &m, v)
            },
            eps,
        )?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum x^2 as the 1x1 product x x^T
        let err = grad_check(
            |t, x| {
                let row = t.reshape(x, &[1, 3])?;
                let sq = t.matmul_transposed(row, row)?;
                Ok(t.sum(sq))
            },
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_tape_op_matches_central_differences() {
        let eps = 1e-5;
        let tol = 1e-6;
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>, Vec<usize>)> = vec![
            (
                "softmax axis 1",
                Box::new(|t, x| {
                    let w = t.input(random(&[3, 4], 1));
                    let s = t.softmax(x, 1)?;
                    let p = t.sub(s, w)?;
                    let d = t.input(Tensor::zeros(&[3, 4]));
                    t.distance(p, d)
                }),
                vec![3, 4],
            ),
            (
                "softmax axis 0 + sigmoid",
                Box::new(|t, x| {
                    let s = t.softmax(x, 0)?;
                    let s = t.sigmoid(s)?;
                    let w = t.input(random(&[3, 4], 2));
                    let d = t.distance(s, w)?;
                    Ok(t.scale(d, 3.0))
                }),
                vec![3, 4],
            ),
            (
                "matmul, scale_rows, sum_rows",
                Box::new(|t, x| {
                    let b = t.input(random(&[4, 5], 3));
                    let c = t.input(random(&[2, 5], 4));
                    let y = t.matmul(x, b)?;
                    let z = t.matmul_transposed(y, c)?;
                    let r = t.sum_rows(z)?;
                    let q = t.scale_rows(x, r)?;
                    let q = t.add_scalar(q, 0.3);
                    let d = t.input(random(&[3, 4], 5));
                    t.distance(q, d)
                }),
                vec![3, 4],
            ),
            (
                "transpose, row and global normalization",
                Box::new(|t, x| {
                    let xt = t.transpose(x)?;
                    let r = t.l2_normalize_rows(xt)?;
                    let f = t.reshape(r, &[12])?;
                    let g = t.l2_normalize(f);
                    let w = t.input(random(&[12], 6));
                    let d = t.distance(g, w)?;
                    Ok(d)
                }),
                vec![3, 4],
            ),
            (
                "sketch + circular convolution + signed sqrt",
                Box::new(|t, x| {
                    let sk = crate::fusion::SketchPair::new(12, 8, 3).unwrap();
                    let other = t.input(random(&[12], 7));
                    let f = crate::fusion::fuse_on_tape(t, x, other, &sk, true)?;
                    let w = t.input(random(&[8], 8));
                    t.distance(f, w)
                }),
                vec![12],
            ),
            (
                "bce",
                Box::new(|t, x| {
                    let s = t.sum(x);
                    let s = t.scale(s, 0.2);
                    let p = t.sigmoid(s)?;
                    let a = t.bce(p, 1.0)?;
                    let b = t.bce(p, 0.0)?;
                    let ab = t.add(a, b)?;
                    Ok(ab)
                }),
                vec![5],
            ),
        ];
        for (name, f, shape) in cases {
            let point = random(&shape, 99);
            let err = grad_check(f, &point, eps).unwrap();
            assert!(err < tol, "{name}: {err}");
        }
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let r = grad_check(
            |t, x| {
                let s = t.sum(x);
                Ok(t.scale(s, f64::INFINITY))
            },
            &Tensor::vector(vec![1.0]),
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn layer_suite_covers_every_stage() {
        let report = layer_suite(3, STEP).unwrap();
        assert_eq!(report.len(), 8);
        for c in &report {
            assert!(c.passed(), "{}: {}", c.layer, c.max_rel_error);
        }
    }
}
