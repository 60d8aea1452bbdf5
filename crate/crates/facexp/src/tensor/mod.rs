//! Reverse-mode autodiff over f64 ndarray tensors.
//!
//! A [`Graph`] is a per-step tape: leaves are inputs or named parameters,
//! every op records its adjoint as a closure over parent indices, and
//! [`Graph::backward`] walks the tape once in reverse. Single-threaded and
//! fully deterministic; tensors are NHWC.

pub mod kernels;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    back: Option<BackwardFn>,
}

/// One training step's computation tape.
#[derive(Default)]
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexable by `Var`.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackwardFn>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { back });
        Var(self.values.len() - 1)
    }

    /// Leaf node: gradients flow to it but it has no parents.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// Leaf node registered under a parameter name for gradient harvesting.
    pub fn named_param(&mut self, name: &str, value: ArrayD<f64>) -> Var {
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.values[v.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 value")
    }

    pub fn value4(&self, v: Var) -> ArrayView4<'_, f64> {
        self.values[v.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected rank-4 value")
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.values[v.0];
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        *val.first().unwrap()
    }

    /// Fails with a divergence error if the node's value is non-finite.
    pub fn check_finite(&self, v: Var, term: &str, step: u64) -> Result<()> {
        if self.values[v.0].iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence {
                term: term.to_string(),
                step,
            })
        }
    }

    /// Reverse pass from `root` (must be scalar); returns gradients for all
    /// reachable nodes including leaves.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].ndim(),
            0,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&self.values, &g, &mut |parent, pg| {
                    match &mut grads[parent] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                });
            }
        }
        Grads { grads }
    }

    /// Collect gradients of all named parameters (missing grads are skipped).
    pub fn harvest(&self, grads: &Grads) -> indexmap::IndexMap<String, ArrayD<f64>> {
        let mut out = indexmap::IndexMap::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.wrt(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    // ---- elementwise and linear ops ----------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                sink(a.0, dy.clone());
                sink(b.0, dy.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] - &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                sink(a.0, dy.clone());
                sink(b.0, dy.mapv(|v| -v));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].mapv(|v| v * c);
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                sink(a.0, dy.mapv(|v| v * c));
            })),
        )
    }

    /// Weighted sum of scalar nodes: sum_i coeffs[i] * terms[i].
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = 0.0;
        for (c, v) in terms {
            acc += c * self.scalar(*v);
        }
        let parents: Vec<(f64, usize)> = terms.iter().map(|(c, v)| (*c, v.0)).collect();
        self.push(
            ndarray::arr0(acc).into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let d = *dy.first().unwrap();
                for (c, p) in &parents {
                    sink(*p, ndarray::arr0(c * d).into_dyn());
                }
            })),
        )
    }

    /// Matrix product of rank-2 nodes: [m,k] x [k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a).to_owned();
        let bv = self.value2(b).to_owned();
        let y = av.dot(&bv);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, dy, sink| {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, dy2.dot(&bv.t()).into_dyn());
                sink(b.0, av.t().dot(&dy2).into_dyn());
            })),
        )
    }

    /// Add a [d] bias row to every row of a [n,d] node.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value2(a).to_owned();
        let bv = &self.values[bias.0];
        assert_eq!(bv.ndim(), 1);
        let y = &av + &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, dy.clone());
                sink(bias.0, dy2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    // ---- activations --------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|v| v.max(0.0));
        self.push(
            value,
            Some(Box::new(move |vals, dy, sink| {
                let mask = vals[a.0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                sink(a.0, dy * &mask);
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.values[a.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            value,
            Some(Box::new(move |vals, dy, sink| {
                let mask = vals[a.0].mapv(|v| if v > 0.0 { 1.0 } else { slope });
                sink(a.0, dy * &mask);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(kernels::sigmoid_scalar);
        let saved = value.clone();
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                sink(a.0, dy * &saved.mapv(|v| v * (1.0 - v)));
            })),
        )
    }

    // ---- structural ops ------------------------------------------------------

    /// Identity forward; gradient multiplied by -scale on the way back.
    pub fn gradient_reverse(&mut self, a: Var, scale: f64) -> Var {
        assert!(scale > 0.0, "gradient reversal scale must be positive");
        let value = self.values[a.0].clone();
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                sink(a.0, dy.mapv(|v| -scale * v));
            })),
        )
    }

    /// Identity forward; stops gradient flow entirely.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.values[a.0].clone();
        self.push(value, None)
    }

    /// Reshape to a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig: Vec<usize> = self.values[a.0].shape().to_vec();
        let value = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(
            value,
            Some(Box::new(move |_vals, dy, sink| {
                let g = dy
                    .clone()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                sink(a.0, g);
            })),
        )
    }

    /// Flatten [n, ...] to [n, prod(rest)].
    pub fn flatten(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Column-wise concat of two [n, p] and [n, q] nodes.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a).to_owned();
        let bv = self.value2(b).to_owned();
        assert_eq!(av.nrows(), bv.nrows());
        let p = av.ncols();
        let y = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat");
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, dy2.slice(ndarray::s![.., ..p]).to_owned().into_dyn());
                sink(b.0, dy2.slice(ndarray::s![.., p..]).to_owned().into_dyn());
            })),
        )
    }

    // ---- convolution stack ----------------------------------------------------

    /// 3x3 stride-1 same-padding convolution; weight [3,3,ci,co], bias [co].
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = kernels::conv3x3(
            self.value4(x),
            &self.values[weight.0]
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned(),
            &self.values[bias.0]
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
        );
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, dy, sink| {
                let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = vals[weight.0].view().into_dimensionality::<Ix4>().unwrap();
                let (n, h, w, c_in) = xv.dim();
                let c_out = wv.dim().3;
                let dy2 = dy
                    .view()
                    .into_shape_with_order((n * h * w, c_out))
                    .unwrap();
                let cols = kernels::im2col3x3(xv);
                let w2 = wv
                    .into_shape_with_order((9 * c_in, c_out))
                    .expect("conv weight view");
                // dW = cols^T . dY
                let dw = cols
                    .t()
                    .dot(&dy2)
                    .into_shape_with_order((3, 3, c_in, c_out))
                    .unwrap();
                sink(weight.0, dw.into_dyn());
                // db = column sums of dY
                sink(bias.0, dy2.sum_axis(Axis(0)).into_dyn());
                // dX = col2im(dY . W^T)
                let dcols = dy2.dot(&w2.t());
                sink(x.0, kernels::col2im3x3(&dcols, n, h, w, c_in).into_dyn());
            })),
        )
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let y = kernels::avgpool2(self.value4(x));
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                sink(x.0, kernels::avgpool2_back(dy4).into_dyn());
            })),
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = kernels::upsample2(self.value4(x));
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                sink(x.0, kernels::upsample2_back(dy4).into_dyn());
            })),
        )
    }

    // ---- normalization ---------------------------------------------------------

    /// Batch normalization in training mode: statistics over all axes except
    /// the last (channel) axis. Returns the output node plus the biased batch
    /// mean/variance for running-statistic updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, (Array1<f64>, Array1<f64>)) {
        let xv = &self.values[x.0];
        let c = *xv.shape().last().expect("batchnorm input rank >= 1");
        let count = (xv.len() / c) as f64;
        let flat = xv
            .view()
            .into_shape_with_order((xv.len() / c, c))
            .expect("batchnorm flatten");
        let mean = flat.sum_axis(Axis(0)) / count;
        let var = flat
            .rows()
            .into_iter()
            .fold(Array1::<f64>::zeros(c), |acc, row| {
                let d = &row - &mean;
                acc + &d * &d
            })
            / count;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (&flat - &mean) * &inv_std;
        let gv = self.values[gamma.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = self.values[beta.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let y2 = &xhat * &gv + &bv;
        let y = y2
            .into_shape_with_order(xv.raw_dim())
            .expect("batchnorm reshape");
        let xhat_saved = xhat.clone();
        let inv_std_saved = inv_std.clone();
        let out = self.push(
            y,
            Some(Box::new(move |vals, dy, sink| {
                let c = xhat_saved.ncols();
                let m = xhat_saved.nrows() as f64;
                let dy2 = dy
                    .view()
                    .into_shape_with_order((xhat_saved.nrows(), c))
                    .unwrap();
                let gv = vals[gamma.0]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let dbeta = dy2.sum_axis(Axis(0));
                let dgamma = (&dy2 * &xhat_saved).sum_axis(Axis(0));
                // dx = gamma*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                let sum_dy = dy2.sum_axis(Axis(0));
                let sum_dy_xhat = (&dy2 * &xhat_saved).sum_axis(Axis(0));
                let term = dy2.mapv(|v| v * m) - &sum_dy - &xhat_saved * &sum_dy_xhat;
                let dx2 = term * (&gv.to_owned() * &inv_std_saved / m);
                let dx = dx2
                    .into_shape_with_order(vals[x.0].raw_dim())
                    .expect("batchnorm grad reshape");
                sink(x.0, dx);
                sink(gamma.0, dgamma.into_dyn());
                sink(beta.0, dbeta.into_dyn());
            })),
        );
        (out, (mean, var))
    }

    /// Batch normalization with fixed statistics (evaluation mode). The
    /// statistics are constants; gradients flow only through x/gamma/beta.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let xv = &self.values[x.0];
        let c = *xv.shape().last().unwrap();
        assert_eq!(mean.len(), c);
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let flat = xv
            .view()
            .into_shape_with_order((xv.len() / c, c))
            .expect("batchnorm flatten");
        let xhat = (&flat - mean) * &inv_std;
        let gv = self.values[gamma.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = self.values[beta.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let y = (&xhat * &gv + &bv)
            .into_shape_with_order(xv.raw_dim())
            .expect("batchnorm reshape");
        let xhat_saved = xhat;
        let inv_std_saved = inv_std;
        self.push(
            y,
            Some(Box::new(move |vals, dy, sink| {
                let c = xhat_saved.ncols();
                let rows = xhat_saved.nrows();
                let dy2 = dy.view().into_shape_with_order((rows, c)).unwrap();
                let gv = vals[gamma.0]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                sink(beta.0, dy2.sum_axis(Axis(0)).into_dyn());
                sink(gamma.0, (&dy2 * &xhat_saved).sum_axis(Axis(0)).into_dyn());
                let scale = &gv.to_owned() * &inv_std_saved;
                let dx = (&dy2 * &scale)
                    .into_shape_with_order(vals[x.0].raw_dim())
                    .expect("batchnorm grad reshape");
                sink(x.0, dx);
            })),
        )
    }

    // ---- losses -----------------------------------------------------------------

    /// Mean softmax cross-entropy of [n,k] logits against integer labels.
    pub fn softmax_ce_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value2(logits).to_owned();
        let (n, k) = z.dim();
        assert_eq!(labels.len(), n, "label count mismatch");
        assert!(labels.iter().all(|&l| l < k), "label out of range");
        let probs = kernels::softmax_rows(&z);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            total += lse - z[[i, label]];
        }
        let labels_saved = labels.to_vec();
        self.push(
            ndarray::arr0(total / n as f64).into_dyn(),
            Some(Box::new(move |_vals, dy, sink| {
                let d = *dy.first().unwrap();
                let mut dz = probs.clone();
                for (i, &label) in labels_saved.iter().enumerate() {
                    dz[[i, label]] -= 1.0;
                }
                dz.mapv_inplace(|v| v * d / labels_saved.len() as f64);
                sink(logits.0, dz.into_dyn());
            })),
        )
    }

    /// Mean binary cross-entropy with logits against a constant target.
    pub fn bce_logits_mean(&mut self, logits: Var, target: f64) -> Var {
        let z = self.values[logits.0].clone();
        let n = z.len() as f64;
        // max(z,0) - z*t + ln(1 + e^{-|z|})
        let total: f64 = z
            .iter()
            .map(|&v| v.max(0.0) - v * target + (-v.abs()).exp().ln_1p())
            .sum();
        self.push(
            ndarray::arr0(total / n).into_dyn(),
            Some(Box::new(move |vals, dy, sink| {
                let d = *dy.first().unwrap();
                let zv = &vals[logits.0];
                let n = zv.len() as f64;
                let dz = zv.mapv(|v| (kernels::sigmoid_scalar(v) - target) * d / n);
                sink(logits.0, dz);
            })),
        )
    }

    /// Mean absolute difference between two same-shape nodes.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "l1_mean shape mismatch"
        );
        let diff = &self.values[a.0] - &self.values[b.0];
        let n = diff.len() as f64;
        let total: f64 = diff.iter().map(|v| v.abs()).sum();
        self.push(
            ndarray::arr0(total / n).into_dyn(),
            Some(Box::new(move |vals, dy, sink| {
                let d = *dy.first().unwrap();
                let diff = &vals[a.0] - &vals[b.0];
                let n = diff.len() as f64;
                // subgradient 0 at ties (f64::signum would give +/-1 at 0.0)
                let da = diff.mapv(|v| {
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s * d / n
                });
                sink(b.0, da.mapv(|v| -v));
                sink(a.0, da);
            })),
        )
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let total: f64 = self.values[a.0].sum();
        self.push(
            ndarray::arr0(total / n).into_dyn(),
            Some(Box::new(move |vals, dy, sink| {
                let d = *dy.first().unwrap();
                let n = vals[a.0].len() as f64;
                sink(a.0, vals[a.0].mapv(|_| d / n));
            })),
        )
    }
}

#[cfg(test)]
mod tests;
