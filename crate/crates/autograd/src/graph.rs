use crate::kernels::{self, ConvGeom, Mat};
use crate::{Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Add(Var, Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Resize {
        input: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    MaxPool2 {
        input: Var,
        arg: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BroadcastAdd {
        input: Var,
        bias: Var,
    },
    WeightedSum(Vec<(Var, f64)>),
    Custom(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so the
/// reverse sweep in [`Graph::backward`] is a plain reverse iteration.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.needs(var)
    }

    /// 2-D convolution, square kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::Shape(format!(
                    "conv bias has {} elements, expected {cout}",
                    self.value(b).numel()
                )));
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv kernel {kh} stride {stride} pad {pad} does not fit input {h}x{w}"
            )));
        }
        let geom = ConvGeom::new(cin, h, w, kh, stride, pad);
        let (k, p) = (geom.rows(), geom.patches());
        // One GEMM over the whole batch: patch matrix is `[k][n * p]`.
        let np = n * p;
        let cols = kernels::im2col(&geom, self.value(input).data(), n);
        let mut out = vec![0.0; cout * np];
        {
            kernels::gemm(Mat::new(self.value(weight).data(), cout, k), Mat::new(&cols, k, np), &mut out, 0.0);
        }
        let mut out = kernels::from_channel_major(&out, n, cout, p);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for b in 0..n {
                for co in 0..cout {
                    let off = (b * cout + co) * p;
                    out[off..off + p].iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let cols_all = self.needs(weight).then_some(cols);
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                batch: n,
                cout,
                cols: cols_all,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut value = self.value(input).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(input);
        self.push(value, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("add_all of zero tensors".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "group norm affine params must have {c} elements"
            )));
        }
        let mut out = vec![0.0; n * c * h * w];
        let mut mean = vec![0.0; n * groups];
        let mut rstd = vec![0.0; n * groups];
        kernels::group_norm_forward(
            self.value(input).data(),
            n,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            GN_EPS,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            needs,
        ))
    }

    /// Bilinear resampling to `(out_h, out_w)` with half-pixel centers.
    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("resize to an empty grid".into()));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(input);
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        kernels::resize_forward(
            self.value(input).data(),
            n * c,
            (h, w),
            (out_h, out_w),
            &mut out,
        );
        let needs = self.needs(input);
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Resize {
                input,
                from: (h, w),
                to: (out_h, out_w),
            },
            needs,
        ))
    }

    /// 2x2 max pooling, stride 2, output `ceil(h/2) x ceil(w/2)`.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; n * c * ho * wo];
        let arg = kernels::maxpool2_forward(self.value(input).data(), n * c, (h, w), &mut out);
        let needs = self.needs(input);
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, arg }, needs))
    }

    /// Spatial mean, `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = (h * w) as f64;
        let data: Vec<f64> = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let needs = self.needs(input);
        let value = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), needs))
    }

    /// Adds a per-`(n, c)` value, `[n, c, 1, 1]`, to every spatial position.
    pub fn broadcast_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [n, c, 1, 1] {
            return Err(Error::Shape(format!(
                "broadcast bias {:?} does not fit {:?}",
                self.value(bias).shape(),
                self.value(input).shape()
            )));
        }
        let mut value = self.value(input).clone();
        {
            let bd = self.value(bias).data().to_vec();
            for (plane, b) in value.data_mut().chunks_mut(h * w).zip(bd) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::BroadcastAdd { input, bias }, needs))
    }

    /// Scalar `sum_i weight_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum term has shape {:?}",
                    t.shape()
                )));
            }
            total += wgt * t.data()[0];
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Scalar node whose value and local gradients were computed outside the
    /// graph (fused losses). Each gradient must match its input's shape.
    pub fn custom_scalar(&mut self, value: f64, local_grads: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "local gradient {:?} does not match input {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        let needs = local_grads.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Tensor::scalar(value), Op::Custom(local_grads), needs))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let mut g = gout.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                batch,
                cout,
                cols,
            } => self.conv_backward(
                gout, *input, *weight, *bias, geom, *batch, *cout, cols.as_deref(), grads,
            )?,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (n, c, h, w) = gout.dims4()?;
                let mut dx = self.needs(*input).then(|| Tensor::zeros(&[n, c, h, w]));
                let mut dg = self.needs(*gamma).then(|| Tensor::zeros(&[c]));
                let mut db = self.needs(*beta).then(|| Tensor::zeros(&[c]));
                kernels::group_norm_backward(
                    self.value(*input).data(),
                    gout.data(),
                    n,
                    c,
                    h * w,
                    *groups,
                    self.value(*gamma).data(),
                    mean,
                    rstd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dg.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dg) = dg {
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, dg.reshape(&shape)?);
                }
                if let Some(db) = db {
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, db.reshape(&shape)?);
                }
            }
            Op::Resize { input, from, to } => {
                let (n, c, _, _) = gout.dims4()?;
                let mut dx = Tensor::zeros(&[n, c, from.0, from.1]);
                kernels::resize_backward(gout.data(), n * c, *from, *to, dx.data_mut());
                self.accumulate(grads, *input, dx);
            }
            Op::MaxPool2 { input, arg } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                for p in 0..n * c {
                    for i in 0..ho * wo {
                        d[p * h * w + arg[p * ho * wo + i]] += gout.data()[p * ho * wo + i];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = (h * w) as f64;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(gout.data()) {
                    plane.iter_mut().for_each(|v| *v = g / hw);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BroadcastAdd { input, bias } => {
                let (n, c, h, w) = gout.dims4()?;
                if self.needs(*bias) {
                    let sums: Vec<f64> = gout.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(&[n, c, 1, 1], sums)?);
                }
                self.accumulate(grads, *input, gout.clone());
            }
            Op::WeightedSum(terms) => {
                let g = gout.data()[0];
                for &(v, wgt) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g * wgt));
                }
            }
            Op::Custom(local) => {
                let g = gout.data()[0];
                for (v, lg) in local {
                    if !self.needs(*v) {
                        continue;
                    }
                    let mut t = lg.clone();
                    t.scale(g);
                    self.accumulate(grads, *v, t);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        gout: &Tensor,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        batch: usize,
        cout: usize,
        cols: Option<&[f64]>,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (k, p) = (geom.rows(), geom.patches());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let dy = gout.data();
        let in_plane = geom.cin * geom.h * geom.w;

        if let Some(bv) = bias.filter(|b| self.needs(*b)) {
            let mut db = Tensor::zeros(self.value(bv).shape());
            for b in 0..batch {
                for co in 0..cout {
                    let off = (b * cout + co) * p;
                    db.data_mut()[co] += dy[off..off + p].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, bv, db);
        }

        let np = batch * p;
        let dy_cm = kernels::to_channel_major(dy, batch, cout, p);
        if self.needs(weight) {
            let recomputed;
            let cb: &[f64] = match cols {
                Some(all) => all,
                None => {
                    recomputed = kernels::im2col(geom, x, batch);
                    &recomputed
                }
            };
            let mut dw = Tensor::zeros(self.value(weight).shape());
            kernels::gemm(Mat::new(&dy_cm, cout, np), Mat::t(cb, k, np), dw.data_mut(), 0.0);
            self.accumulate(grads, weight, dw);
        }

        if self.needs(input) {
            let mut dx = Tensor::zeros(self.value(input).shape());
            let mut dcols = vec![0.0; k * np];
            kernels::gemm(Mat::t(wt, cout, k), Mat::new(&dy_cm, cout, np), &mut dcols, 0.0);
            for b in 0..batch {
                kernels::col2im_add(geom, &dcols, np, b * p, &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane]);
            }
            self.accumulate(grads, input, dx);
        }
        Ok(())
    }
}
