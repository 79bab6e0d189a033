//! Central-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::ops::{self, ConvLayer, Tensor};
use super::{init_model, ArchDescriptor, ModelParams, NetOutput, OutputGrad, Tape};
use crate::deform::rng_from_seed;
use crate::error::{Error, Result};
use crate::raster::{RasterTriple, Scale};
use crate::training::{disp_loss_grad, seg_loss_grad};

/// Default number of coordinates compared per check.
pub const DEFAULT_COORDS: usize = 256;
/// Pass threshold for the gradient gate.
pub const GATE: f64 = 1e-4;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
    fn value(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
}

/// Objective given by a closure returning `(value, gradient)` at `x`.
pub struct FnObjective<F> {
    pub x: Vec<f64>,
    pub f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.x.len()
    }
    fn get(&self, i: usize) -> f64 {
        self.x[i]
    }
    fn set(&mut self, i: usize, v: f64) {
        self.x[i] = v;
    }
    fn value(&self) -> f64 {
        (self.f)(&self.x).0
    }
    fn gradient(&self) -> Vec<f64> {
        (self.f)(&self.x).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error.
    pub worst: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the analytic gradient against central differences on up to
/// `max_coords` randomly chosen coordinates.
pub fn check_objective<O: Objective + ?Sized>(obj: &mut O, epsilon: f64, max_coords: usize, seed: u64) -> GradCheckReport {
    let analytic = obj.gradient();
    let dim = obj.dim();
    let mut rng = rng_from_seed(seed);
    let coords: Vec<usize> = if dim <= max_coords {
        (0..dim).collect()
    } else {
        let mut c = sample(&mut rng, dim, max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: coords.len(), worst: 0 };
    for &i in &coords {
        let x0 = obj.get(i);
        obj.set(i, x0 + epsilon);
        let up = obj.value();
        obj.set(i, x0 - epsilon);
        let down = obj.value();
        obj.set(i, x0);
        let numeric = (up - down) / (2.0 * epsilon);
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = i;
        }
    }
    report
}

fn flatten(m: &ModelParams<f64>) -> Vec<f64> {
    m.params().copied().collect()
}

fn unflatten(m: &mut ModelParams<f64>, x: &[f64]) {
    for (p, &v) in m.params_mut().zip(x) {
        *p = v;
    }
}

/// Loss on the network outputs returning `(value, upstream gradients)`.
pub type LossFn<'a> = dyn Fn(&NetOutput<f64>) -> (f64, OutputGrad<f64>) + 'a;

/// Max relative error between backpropagated parameter gradients of
/// `loss_fn(forward(m, input))` and central differences.
pub fn finite_diff_check(m: &ModelParams<f64>, input: &Tensor<f64>, loss_fn: &LossFn<'_>, epsilon: f64) -> Result<f64> {
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!("epsilon must be in [1e-5, 1e-3], got {epsilon}")));
    }
    let template = m.clone();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut model = template.clone();
        unflatten(&mut model, x);
        let mut tape = Tape::new();
        let out = tape.forward(&model, input)?;
        let (value, up) = loss_fn(&out);
        let grads = tape.backward(&model, &up)?;
        Ok((value, grads.iter().copied().collect()))
    };
    eval(&flatten(m))?;
    let mut obj = FnObjective {
        x: flatten(m),
        f: |x: &[f64]| eval(x).expect("validated above"),
    };
    Ok(check_objective(&mut obj, epsilon, DEFAULT_COORDS, 0x5EED).max_rel_error)
}

/// Result of one named check in [`gradcheck_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GATE
    }
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Wraps `op` as an objective `sum(r * op(x))` with fixed random weights `r`.
fn weighted_check(
    name: &str,
    x: Vec<f64>,
    out_len: usize,
    epsilon: f64,
    seed: u64,
    corrupt: bool,
    op: impl Fn(&[f64]) -> Vec<f64>,
    back: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> OpCheck {
    let mut rng = rng_from_seed(seed);
    let r = random_vec(&mut rng, out_len, 1.0);
    let mut obj = FnObjective {
        x,
        f: |x: &[f64]| {
            let y = op(x);
            let v = y.iter().zip(&r).map(|(a, b)| a * b).sum();
            let mut g = back(x, &r);
            if corrupt {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            (v, g)
        },
    };
    let rep = check_objective(&mut obj, epsilon, DEFAULT_COORDS, seed ^ 1);
    OpCheck { name: name.to_string(), max_rel_error: rep.max_rel_error }
}

fn conv_from(x: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> (Tensor<f64>, ConvLayer<f64>) {
    let nx = cin * h * w;
    let nw = cout * cin * 9;
    let input = Tensor::from_vec([1, cin, h, w], x[..nx].to_vec());
    let layer = ConvLayer {
        in_ch: cin,
        out_ch: cout,
        weight: x[nx..nx + nw].to_vec(),
        bias: x[nx + nw..].to_vec(),
    };
    (input, layer)
}

/// Checks every op, the single-layer linear model and the full network under
/// the combined displacement + segmentation loss. With `corrupt`, analytic
/// gradients are perturbed by 1% so the failure path can be exercised.
pub fn gradcheck_suite(epsilon: f64, corrupt: bool) -> Result<Vec<OpCheck>> {
    let mut rng = rng_from_seed(42);
    let mut out = Vec::new();
    let (h, w) = (6, 8);

    let (cin, cout) = (3, 4);
    let n = cin * h * w + cout * cin * 9 + cout;
    out.push(weighted_check(
        "conv3x3",
        random_vec(&mut rng, n, 1.0),
        cout * h * w,
        epsilon,
        1,
        corrupt,
        |x| {
            let (t, l) = conv_from(x, cin, cout, h, w);
            ops::conv3x3_forward(&t, &l).data
        },
        |x, r| {
            let (t, l) = conv_from(x, cin, cout, h, w);
            let (gx, gw, gb) = ops::conv3x3_backward(&t, &l, &Tensor::from_vec([1, cout, h, w], r.to_vec()));
            [gx.data, gw, gb].concat()
        },
    ));

    let shape = [1, 2, h, w];
    let len = 2 * h * w;
    out.push(weighted_check(
        "silu",
        random_vec(&mut rng, len, 3.0),
        len,
        epsilon,
        2,
        corrupt,
        |x| ops::silu_forward(&Tensor::from_vec(shape, x.to_vec())).data,
        |x, r| ops::silu_backward(&Tensor::from_vec(shape, x.to_vec()), &Tensor::from_vec(shape, r.to_vec())).data,
    ));
    out.push(weighted_check(
        "scaled_tanh",
        random_vec(&mut rng, len, 2.0),
        len,
        epsilon,
        3,
        corrupt,
        |x| ops::scaled_tanh_forward(&Tensor::from_vec(shape, x.to_vec()), 4.0).data,
        |x, r| {
            ops::scaled_tanh_backward(&Tensor::from_vec(shape, x.to_vec()), 4.0, &Tensor::from_vec(shape, r.to_vec())).data
        },
    ));
    out.push(weighted_check(
        "maxpool2",
        random_vec(&mut rng, len, 1.0),
        len / 4,
        epsilon,
        4,
        corrupt,
        |x| ops::maxpool2_forward(&Tensor::from_vec(shape, x.to_vec())).0.data,
        |x, r| {
            let (p, idx) = ops::maxpool2_forward(&Tensor::from_vec(shape, x.to_vec()));
            ops::maxpool2_backward(shape, &idx, &Tensor::from_vec(p.shape, r.to_vec())).data
        },
    ));
    let small = [1, 2, h / 2, w / 2];
    out.push(weighted_check(
        "upsample2",
        random_vec(&mut rng, len / 4, 1.0),
        len,
        epsilon,
        5,
        corrupt,
        |x| ops::upsample2_forward(&Tensor::from_vec(small, x.to_vec())).data,
        |_, r| ops::upsample2_backward(&Tensor::from_vec(shape, r.to_vec())).data,
    ));
    out.push(weighted_check(
        "concat",
        random_vec(&mut rng, 2 * len, 1.0),
        2 * len,
        epsilon,
        6,
        corrupt,
        |x| ops::concat_forward(&Tensor::from_vec(shape, x[..len].to_vec()), &Tensor::from_vec(shape, x[len..].to_vec())).data,
        |_, r| {
            let (a, b) = ops::concat_backward(&Tensor::from_vec([1, 4, h, w], r.to_vec()), 2);
            [a.data, b.data].concat()
        },
    ));

    let target = random_vec(&mut rng, len, 4.0);
    let mut obj = FnObjective {
        x: random_vec(&mut rng, len, 4.0),
        f: |x: &[f64]| {
            let (v, g) = disp_loss_grad(&Tensor::from_vec(shape, x.to_vec()), &Tensor::from_vec(shape, target.clone()), 1.0);
            let mut g = g.data;
            if corrupt {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            (v, g)
        },
    };
    out.push(OpCheck {
        name: "loss_displacement".into(),
        max_rel_error: check_objective(&mut obj, epsilon, DEFAULT_COORDS, 7).max_rel_error,
    });

    let seg_target = random_raster(&mut rng, h, w);
    let seg_shape = [1, 3, h, w];
    let mut obj = FnObjective {
        x: random_vec(&mut rng, 3 * h * w, 5.0),
        f: |x: &[f64]| {
            let (v, g) = seg_loss_grad(&Tensor::from_vec(seg_shape, x.to_vec()), &[&seg_target]);
            let mut g = g.data;
            if corrupt {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            (v, g)
        },
    };
    out.push(OpCheck {
        name: "loss_segmentation".into(),
        max_rel_error: check_objective(&mut obj, epsilon, DEFAULT_COORDS, 8).max_rel_error,
    });

    // Linear model: one convolution under a quadratic loss.
    let target_lin = random_vec(&mut rng, 2 * h * w, 1.0);
    let n_lin = 3 * h * w + 2 * 3 * 9 + 2;
    let mut obj = FnObjective {
        x: random_vec(&mut rng, n_lin, 1.0),
        f: |x: &[f64]| {
            let (t, l) = conv_from(x, 3, 2, h, w);
            let y = ops::conv3x3_forward(&t, &l);
            let diff: Vec<f64> = y.data.iter().zip(&target_lin).map(|(a, b)| a - b).collect();
            let v = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            let (gx, gw, gb) = ops::conv3x3_backward(&t, &l, &Tensor::from_vec(y.shape, diff));
            let mut g = [gx.data, gw, gb].concat();
            if corrupt {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
            (v, g)
        },
    };
    out.push(OpCheck {
        name: "linear_model".into(),
        max_rel_error: check_objective(&mut obj, epsilon, usize::MAX, 9).max_rel_error,
    });

    let gn_shape = [2, 4, h, w];
    let gn_len = 2 * 4 * h * w;
    out.push(weighted_check(
        "group_norm",
        random_vec(&mut rng, gn_len, 2.0),
        gn_len,
        epsilon,
        10,
        corrupt,
        |x| ops::group_norm_forward(&Tensor::from_vec(gn_shape, x.to_vec()), 2).0.data,
        |x, r| {
            let (y, inv_std) = ops::group_norm_forward(&Tensor::from_vec(gn_shape, x.to_vec()), 2);
            ops::group_norm_backward(&y, &inv_std, 2, &Tensor::from_vec(gn_shape, r.to_vec())).data
        },
    ));

    out.push(OpCheck {
        name: "full_network".into(),
        max_rel_error: full_network_check(epsilon, 0.1, corrupt)?,
    });
    Ok(out)
}

fn random_raster(rng: &mut impl Rng, h: usize, w: usize) -> RasterTriple {
    let mut r = RasterTriple::zeros(crate::geometry::Extent::new(h, w));
    for plane in [&mut r.interior, &mut r.edge, &mut r.vertices] {
        plane.iter_mut().for_each(|v| *v = rng.random_range(0..2));
    }
    r
}

/// Gradient of the combined loss `sum|f - f_gt|^2 + lambda * BCE` through a
/// depth-2 network, in double precision.
pub fn full_network_check(epsilon: f64, seg_weight: f64, corrupt: bool) -> Result<f64> {
    let arch = ArchDescriptor::new(vec![4, 8]);
    let m = init_model::<f64>(&arch, Scale::Full, 17)?;
    let (h, w) = (8, 8);
    let mut rng = rng_from_seed(23);
    let input = Tensor::from_vec([1, 6, h, w], random_vec(&mut rng, 6 * h * w, 1.0));
    let target = Tensor::from_vec([1, 2, h, w], random_vec(&mut rng, 2 * h * w, 1.0));
    let seg_target = random_raster(&mut rng, h, w);
    let loss = |out: &NetOutput<f64>| {
        let (dv, dg) = disp_loss_grad(&out.disp, &target, 1.0);
        let (sv, mut sg) = seg_loss_grad(&out.seg_logits, &[&seg_target]);
        sg.data.iter_mut().for_each(|v| *v *= seg_weight);
        let mut up = OutputGrad { disp: dg, seg_logits: sg };
        if corrupt {
            up.disp.data.iter_mut().for_each(|v| *v *= 1.01);
        }
        (dv + seg_weight * sv, up)
    };
    finite_diff_check(&m, &input, &loss, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut obj = FnObjective {
            x: vec![0.3, -1.2, 2.0],
            f: |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()),
        };
        assert!(check_objective(&mut obj, 1e-4, 10, 0).max_rel_error < 1e-7);
    }

    #[test]
    fn suite_passes_and_corruption_fails() {
        let checks = gradcheck_suite(1e-5, false).unwrap();
        for c in &checks {
            assert!(c.passed(), "{} -> {}", c.name, c.max_rel_error);
        }
        let lin = checks.iter().find(|c| c.name == "linear_model").unwrap();
        assert!(lin.max_rel_error < 1e-7, "{}", lin.max_rel_error);
        let bad = gradcheck_suite(1e-5, true).unwrap();
        assert!(bad.iter().all(|c| !c.passed()));
    }

    #[test]
    fn epsilon_refinement_is_consistent() {
        let coarse = full_network_check(1e-3, 0.1, false).unwrap();
        let fine = full_network_check(1e-4, 0.1, false).unwrap();
        assert!(fine <= coarse.max(1e-8), "1e-3: {coarse}, 1e-4: {fine}");
    }

    #[test]
    fn epsilon_out_of_range() {
        let m = init_model::<f64>(&ArchDescriptor::new(vec![2]), Scale::Full, 0).unwrap();
        let x = Tensor::zeros([1, 6, 4, 4]);
        let loss = |o: &NetOutput<f64>| (0.0, OutputGrad::zeros_like(o));
        assert!(finite_diff_check(&m, &x, &loss, 1e-2).is_err());
    }
}
