//! Reverse-mode automatic differentiation on dynamic-dimension `f32` arrays.
//!
//! A [`Graph`] is a tape of values plus backward closures. [`Var`] handles
//! reference nodes on the tape; every operator records how to push gradients
//! back to its inputs. The tape is rebuilt every forward pass, while trainable
//! parameters live outside it (see [`crate::nn::Param`]) and are linked in as
//! leaves.
//!
//! The op set is exactly what the generators, discriminators and losses need:
//! elementwise math, matrix products, 2-D convolution via im2col, batch norm,
//! pooling/upsampling and a few broadcast helpers. Everything runs on a single
//! thread, so two runs from the same seed produce bitwise-identical results.

pub mod check;
mod conv;

pub use conv::conv_out_size;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

use crate::nn::Param;

/// Dynamic-dimension float array, the only tensor type on the tape.
pub type Arr = ArrayD<f32>;

type BackFn = Box<dyn Fn(&[Arr], &Arr, &mut dyn FnMut(usize, Arr))>;

struct GraphInner {
    values: Vec<Arr>,
    backward: Vec<Option<BackFn>>,
    param_links: Vec<(usize, Param)>,
}

/// Computation tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    idx: usize,
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Arr> {
        self.grads[v.idx].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                values: Vec::new(),
                backward: Vec::new(),
                param_links: Vec::new(),
            })),
        }
    }

    fn push(&self, value: Arr, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backward.push(back);
        Var {
            graph: self.clone(),
            idx: inner.values.len() - 1,
        }
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&self, value: Arr) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&self, value: f32) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Leaf backed by a trainable parameter. After [`Graph::backward`] the
    /// parameter's gradient accumulator receives the leaf's gradient.
    pub fn param(&self, p: &Param) -> Var {
        let v = self.push(p.value().clone(), None);
        self.inner
            .borrow_mut()
            .param_links
            .push((v.idx, p.clone()));
        v
    }

    /// Run reverse-mode differentiation from `root` (must be scalar-shaped).
    /// Gradients for parameter leaves are accumulated into their [`Param`]s.
    pub fn backward(&self, root: &Var) -> Gradients {
        let inner = self.inner.borrow();
        let n = inner.values.len();
        let mut grads: Vec<Option<Arr>> = vec![None; n];
        assert!(
            inner.values[root.idx].len() == 1,
            "backward root must be a scalar, got shape {:?}",
            inner.values[root.idx].shape()
        );
        grads[root.idx] = Some(ArrayD::from_elem(
            inner.values[root.idx].raw_dim(),
            1.0f32,
        ));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &inner.backward[i] {
                back(&inner.values, &g, &mut |j, contrib| {
                    debug_assert!(j < i, "backward edge must point to earlier node");
                    match &mut grads[j] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                });
            }
            grads[i] = Some(g);
        }
        for (idx, p) in &inner.param_links {
            if let Some(g) = &grads[*idx] {
                p.accumulate_grad(g);
            }
        }
        Gradients { grads }
    }
}

impl Var {
    pub fn value(&self) -> Arr {
        self.graph.inner.borrow().values[self.idx].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.idx].shape().to_vec()
    }

    pub fn scalar_value(&self) -> f32 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        v.iter().copied().next().unwrap()
    }

    /// New constant leaf carrying this node's value; gradients stop here.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    fn unary(&self, value: Arr, back: impl Fn(&Arr, &Arr) -> Arr + 'static) -> Var {
        let a = self.idx;
        self.graph.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink(a, back(&vals[a], g));
            })),
        )
    }

    fn binary(
        &self,
        other: &Var,
        value: Arr,
        back: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
    ) -> Var {
        assert!(Rc::ptr_eq(&self.graph.inner, &other.graph.inner));
        let (a, b) = (self.idx, other.idx);
        self.graph.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let (ga, gb) = back(&vals[a], &vals[b], g);
                sink(a, ga);
                sink(b, gb);
            })),
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = &self.value() + &other.value();
        self.binary(other, v, |_, _, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = &self.value() - &other.value();
        self.binary(other, v, |_, _, g| (g.clone(), -g.clone()))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = &self.value() * &other.value();
        self.binary(other, v, |a, b, g| (g * b, g * a))
    }

    pub fn neg(&self) -> Var {
        self.unary(-self.value(), |_, g| -g.clone())
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        self.unary(self.value() + s, |_, g| g.clone())
    }

    pub fn mul_scalar(&self, s: f32) -> Var {
        self.unary(self.value() * s, move |_, g| g * s)
    }

    pub fn relu(&self) -> Var {
        self.unary(self.value().mapv(|x| x.max(0.0)), |x, g| {
            let mut out = g.clone();
            out.zip_mut_with(x, |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0
                }
            });
            out
        })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        self.unary(
            self.value().mapv(|x| if x > 0.0 { x } else { slope * x }),
            move |x, g| {
                let mut out = g.clone();
                out.zip_mut_with(x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi *= slope
                    }
                });
                out
            },
        )
    }

    pub fn sigmoid(&self) -> Var {
        let y = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let yc = y.clone();
        self.unary(y, move |_, g| g * &(&yc * &yc.mapv(|v| 1.0 - v)))
    }

    pub fn tanh(&self) -> Var {
        let y = self.value().mapv(f32::tanh);
        let yc = y.clone();
        self.unary(y, move |_, g| g * &yc.mapv(|v| 1.0 - v * v))
    }

    /// `ln(1 + e^x)`, numerically stable for large |x|.
    pub fn softplus(&self) -> Var {
        let y = self
            .value()
            .mapv(|x| if x > 20.0 { x } else { (1.0 + x.exp()).ln() });
        self.unary(y, |x, g| g * &x.mapv(|v| 1.0 / (1.0 + (-v).exp())))
    }

    pub fn exp(&self) -> Var {
        let y = self.value().mapv(f32::exp);
        let yc = y.clone();
        self.unary(y, move |_, g| g * &yc)
    }

    pub fn ln(&self) -> Var {
        self.unary(self.value().mapv(f32::ln), |x, g| g / x)
    }

    pub fn abs(&self) -> Var {
        self.unary(self.value().mapv(f32::abs), |x, g| {
            g * &x.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only through the interior.
    pub fn clamp(&self, lo: f32, hi: f32) -> Var {
        self.unary(self.value().mapv(|x| x.clamp(lo, hi)), move |x, g| {
            let mut out = g.clone();
            out.zip_mut_with(x, |gi, &xi| {
                if xi < lo || xi > hi {
                    *gi = 0.0
                }
            });
            out
        })
    }

    pub fn mean_all(&self) -> Var {
        let v = self.value();
        let n = v.len() as f32;
        let m = ArrayD::from_elem(IxDyn(&[]), v.sum() / n);
        self.unary(m, move |x, g| {
            let s = g.iter().next().copied().unwrap() / n;
            ArrayD::from_elem(x.raw_dim(), s)
        })
    }

    pub fn sum_all(&self) -> Var {
        let v = self.value();
        let m = ArrayD::from_elem(IxDyn(&[]), v.sum());
        self.unary(m, move |x, g| {
            let s = g.iter().next().copied().unwrap();
            ArrayD::from_elem(x.raw_dim(), s)
        })
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let v = self.value();
        let out = v.sum_axis(Axis(axis));
        self.unary(out.into_dyn(), move |x, g| {
            let mut full = ArrayD::zeros(x.raw_dim());
            for mut lane in full.axis_iter_mut(Axis(axis)) {
                lane += g;
            }
            full
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value();
        let orig: Vec<usize> = v.shape().to_vec();
        let out = v
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(out, move |_, g| {
            g.clone()
                .into_shape(IxDyn(&orig))
                .expect("reshape backward")
        })
    }

    /// `(N, D) x (D, M) -> (N, M)`
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value().into_dimensionality::<Ix2>().unwrap();
        let b = other.value().into_dimensionality::<Ix2>().unwrap();
        let v = a.dot(&b).into_dyn();
        self.binary(other, v, |a, b, g| {
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            (
                g2.dot(&b2.t()).into_dyn(),
                a2.t().dot(&g2).into_dyn(),
            )
        })
    }

    /// `(N, D) x (M, D)^T -> (N, M)`; pairwise row dot products.
    pub fn matmul_nt(&self, other: &Var) -> Var {
        let a = self.value().into_dimensionality::<Ix2>().unwrap();
        let b = other.value().into_dimensionality::<Ix2>().unwrap();
        let v = a.dot(&b.t()).into_dyn();
        self.binary(other, v, |a, b, g| {
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            (
                g2.dot(&b2).into_dyn(),
                g2.t().dot(&a2).into_dyn(),
            )
        })
    }

    /// Add a `(O,)` bias to every row of a `(N, O)` matrix.
    pub fn add_row_broadcast(&self, bias: &Var) -> Var {
        let v = self.value();
        let b = bias.value();
        let mut out = v.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        self.binary(bias, out, |_, _, g| {
            (g.clone(), g.sum_axis(Axis(0)).into_dyn())
        })
    }

    /// L2-normalize each row of a `(N, D)` matrix.
    pub fn normalize_rows(&self, eps: f32) -> Var {
        let v = self.value().into_dimensionality::<Ix2>().unwrap();
        let norms: Vec<f32> = v
            .axis_iter(Axis(0))
            .map(|r| r.mapv(|x| x * x).sum().sqrt().max(eps))
            .collect();
        let mut out = v.clone();
        for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(&norms) {
            row /= n;
        }
        let norms_c = norms.clone();
        let out_c = out.clone();
        self.unary(out.into_dyn(), move |_, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gi = g2.to_owned();
            for ((mut grow, yrow), &n) in gi
                .axis_iter_mut(Axis(0))
                .zip(out_c.axis_iter(Axis(0)))
                .zip(&norms_c)
            {
                let dot: f32 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow.iter()) {
                    *gv = (*gv - yv * dot) / n;
                }
            }
            gi.into_dyn()
        })
    }

    /// Concatenate along the channel axis (axis 1) of `(N, C, H, W)` tensors.
    pub fn concat_channels(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let graph = parts[0].graph.clone();
        let values: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_channels");
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        graph.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let mut start = 0;
                for (&i, &w) in idxs.iter().zip(&widths) {
                    let slice = g
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + w))
                        .to_owned();
                    sink(i, slice);
                    start += w;
                }
            })),
        )
    }

    /// Take channels `[start, start+len)` along axis 1.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Var {
        let v = self.value();
        let out = v
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(out, move |x, g| {
            let mut full = ArrayD::zeros(x.raw_dim());
            full.slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + len))
                .assign(g);
            full
        })
    }

    /// Multiply `(N, C, H, W)` features by a `(N, 1, H, W)` map, broadcasting
    /// over channels. The gating primitive.
    pub fn mul_channel_broadcast(&self, map: &Var) -> Var {
        let f = self.value();
        let m = map.value();
        assert_eq!(m.shape()[1], 1, "gate map must have one channel");
        let mut out = f.clone();
        for (mut sample, msample) in out.axis_iter_mut(Axis(0)).zip(m.axis_iter(Axis(0))) {
            for mut chan in sample.axis_iter_mut(Axis(0)) {
                chan *= &msample.index_axis(Axis(0), 0);
            }
        }
        self.binary(map, out, |f, m, g| {
            let mut gf = g.clone();
            for (mut sample, msample) in gf.axis_iter_mut(Axis(0)).zip(m.axis_iter(Axis(0))) {
                for mut chan in sample.axis_iter_mut(Axis(0)) {
                    chan *= &msample.index_axis(Axis(0), 0);
                }
            }
            let mut gm = ArrayD::zeros(m.raw_dim());
            for ((mut gms, gs), fs) in gm
                .axis_iter_mut(Axis(0))
                .zip(g.axis_iter(Axis(0)))
                .zip(f.axis_iter(Axis(0)))
            {
                let mut acc = gms.index_axis_mut(Axis(0), 0);
                for (gc, fc) in gs.axis_iter(Axis(0)).zip(fs.axis_iter(Axis(0))) {
                    acc += &(&gc.to_owned() * &fc.to_owned());
                }
            }
            (gf, gm)
        })
    }

    /// Broadcast a `(N, C)` feature vector over a spatial grid -> `(N, C, H, W)`.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Var {
        let v = self.value();
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        for i in 0..n {
            for j in 0..c {
                out.slice_mut(ndarray::s![i, j, .., ..])
                    .fill(v[[i, j]]);
            }
        }
        self.unary(out, move |x, g| {
            let mut gv = ArrayD::zeros(x.raw_dim());
            for i in 0..n {
                for j in 0..c {
                    gv[[i, j]] = g.slice(ndarray::s![i, j, .., ..]).sum();
                }
            }
            gv
        })
    }

    /// Multiply every sample `i` in a batch by the constant `scales[i]`.
    pub fn scale_per_sample(&self, scales: &[f32]) -> Var {
        let v = self.value();
        assert_eq!(v.shape()[0], scales.len());
        let mut out = v.clone();
        for (mut s, &k) in out.axis_iter_mut(Axis(0)).zip(scales) {
            s *= k;
        }
        let scales = scales.to_vec();
        self.unary(out, move |_, g| {
            let mut gg = g.clone();
            for (mut s, &k) in gg.axis_iter_mut(Axis(0)).zip(&scales) {
                s *= k;
            }
            gg
        })
    }

    /// 2x2 average pooling (spatial dims must be even).
    pub fn avg_pool2(&self) -> Var {
        let v = self.value();
        let (n, c, h, w) = dims4(&v);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h / 2, w / 2]));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        out[[i, j, y, x]] = (v[[i, j, 2 * y, 2 * x]]
                            + v[[i, j, 2 * y, 2 * x + 1]]
                            + v[[i, j, 2 * y + 1, 2 * x]]
                            + v[[i, j, 2 * y + 1, 2 * x + 1]])
                            / 4.0;
                    }
                }
            }
        }
        self.unary(out, move |_, g| {
            let mut gi = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            for i in 0..n {
                for j in 0..c {
                    for y in 0..h / 2 {
                        for x in 0..w / 2 {
                            let s = g[[i, j, y, x]] / 4.0;
                            gi[[i, j, 2 * y, 2 * x]] = s;
                            gi[[i, j, 2 * y, 2 * x + 1]] = s;
                            gi[[i, j, 2 * y + 1, 2 * x]] = s;
                            gi[[i, j, 2 * y + 1, 2 * x + 1]] = s;
                        }
                    }
                }
            }
            gi
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self) -> Var {
        let v = self.value();
        let (n, c, h, w) = dims4(&v);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h * 2, w * 2]));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let s = v[[i, j, y, x]];
                        out[[i, j, 2 * y, 2 * x]] = s;
                        out[[i, j, 2 * y, 2 * x + 1]] = s;
                        out[[i, j, 2 * y + 1, 2 * x]] = s;
                        out[[i, j, 2 * y + 1, 2 * x + 1]] = s;
                    }
                }
            }
        }
        self.unary(out, move |_, g| {
            let mut gi = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            for i in 0..n {
                for j in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            gi[[i, j, y, x]] = g[[i, j, 2 * y, 2 * x]]
                                + g[[i, j, 2 * y, 2 * x + 1]]
                                + g[[i, j, 2 * y + 1, 2 * x]]
                                + g[[i, j, 2 * y + 1, 2 * x + 1]];
                        }
                    }
                }
            }
            gi
        })
    }
}

pub(crate) fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {:?}", s);
    (s[0], s[1], s[2], s[3])
}
