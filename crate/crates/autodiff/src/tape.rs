use crate::{AutodiffError, ParamId, ParamStore, Result, Tensor, HALF_LN_2PI};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a right-hand operand maps onto the output shape.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// `[1, c]` against `[r, c]`
    Row(usize),
}

impl Bcast {
    fn resolve(op: &'static str, out: &[usize], operand: &[usize]) -> Result<Self> {
        if out == operand {
            return Ok(Bcast::Same);
        }
        let numel: usize = operand.iter().product();
        if numel == 1 {
            return Ok(Bcast::Scalar);
        }
        if let ([_, c], [1, c2]) = (out, operand) {
            if c == c2 {
                return Ok(Bcast::Row(*c));
            }
        }
        Err(AutodiffError::ShapeMismatch {
            op,
            left: out.to_vec(),
            right: operand.to_vec(),
        })
    }

    #[inline]
    fn index(self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Row(c) => k % c,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddConst(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Slice {
        src: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatCols(Vec<Var>),
    GaussianNll {
        x: Var,
        mean: Var,
        log_var: Var,
        mean_b: Bcast,
        lv_b: Bcast,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for a single backward pass.
///
/// Single-threaded and exclusively owned; build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for every parameter in `store`, zero-filled where the
    /// parameter did not influence the loss. Repeated uses of one parameter
    /// on the tape are summed.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.by_node[i]) {
                out[id.0].add_assign(g);
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient slot but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let av = self.value(a);
        let bv = self.value(b);
        let bc = Bcast::resolve(name, av.shape(), bv.shape())?;
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bd[bc.index(k)]))
            .collect();
        Ok((Tensor::new(av.shape(), data)?, bc))
    }

    /// `a + b`; `b` may be a scalar or a `[1, c]` row broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, bc)))
    }

    /// Affine layer `x · w + b` with `w: [in, out]` and row bias `b: [1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddConst(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// Sub-block `rows.0..rows.1 × cols.0..cols.1` of a matrix.
    pub fn slice(&mut self, a: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2().ok_or_else(|| AutodiffError::InvalidShape {
            op: "slice",
            shape: v.shape().to_vec(),
        })?;
        if rows.0 > rows.1 || rows.1 > r || cols.0 > cols.1 || cols.1 > c {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                left: v.shape().to_vec(),
                right: vec![rows.0, rows.1, cols.0, cols.1],
            });
        }
        let mut data = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
        for i in rows.0..rows.1 {
            data.extend_from_slice(&v.data()[i * c + cols.0..i * c + cols.1]);
        }
        let t = Tensor::matrix(rows.1 - rows.0, cols.1 - cols.0, data)?;
        Ok(self.push(t, Op::Slice { src: a, rows, cols }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let r = self.value(a).shape().first().copied().unwrap_or(0);
        self.slice(a, (0, r), (start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
        })?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).dims2() {
                Some((r, c)) if r == rows => widths.push(c),
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        left: self.value(*first).shape().to_vec(),
                        right: self.value(p).shape().to_vec(),
                    })
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Elementwise `½((x − mean)² / exp(log_var) + log_var + log 2π)`.
    ///
    /// `mean` and `log_var` may each be full-shape, a `[1, c]` row, or a scalar.
    /// The result has the shape of `x`; reduce with [`Tape::sum`] or [`Tape::mean`].
    pub fn gaussian_nll(&mut self, x: Var, mean: Var, log_var: Var) -> Result<Var> {
        let xv = self.value(x);
        let mv = self.value(mean);
        let lv = self.value(log_var);
        let mean_b = Bcast::resolve("gaussian_nll", xv.shape(), mv.shape())?;
        let lv_b = Bcast::resolve("gaussian_nll", xv.shape(), lv.shape())?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &xk)| {
                let r = xk - mv.data()[mean_b.index(k)];
                let l = lv.data()[lv_b.index(k)];
                0.5 * (r * r * (-l).exp() + l) + HALF_LN_2PI
            })
            .collect();
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            t,
            Op::GaussianNll {
                x,
                mean,
                log_var,
                mean_b,
                lv_b,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b, bc) => {
                    accumulate(&mut grads, *a, g.clone());
                    let gb = reduce_bcast(&g, *bc, self.value(*b).shape());
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b, bc) => {
                    accumulate(&mut grads, *a, g.clone());
                    let gb = reduce_bcast(&g.map(|x| -x), *bc, self.value(*b).shape());
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b, bc) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga_data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * bv.data()[bc.index(k)])
                        .collect();
                    let ga = Tensor::new(g.shape(), ga_data)?;
                    let gb = reduce_bcast(&g.zip_map(av, |gk, ak| gk * ak), *bc, bv.shape());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::LeakyRelu(a, s) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| if x > 0.0 { gk } else { s * gk });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gk, y| gk * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| gk * sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gk, y| gk * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gk, y| gk * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| 2.0 * x * gk);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |gk, x| {
                        if x > 0.0 {
                            gk
                        } else if x < 0.0 {
                            -gk
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let ga = Tensor::full(av.shape(), g.item() / av.numel() as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::Slice { src, rows, cols } => {
                    let sv = self.value(*src);
                    let mut ga = Tensor::zeros(sv.shape());
                    let w = cols.1 - cols.0;
                    for (bi, i) in (rows.0..rows.1).enumerate() {
                        for (bj, j) in (cols.0..cols.1).enumerate() {
                            ga.set2(i, j, g.data()[bi * w + bj]);
                        }
                    }
                    accumulate(&mut grads, *src, ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.shape()[0];
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        accumulate(&mut grads, p, Tensor::matrix(rows, w, data)?);
                        offset += w;
                    }
                }
                Op::GaussianNll {
                    x,
                    mean,
                    log_var,
                    mean_b,
                    lv_b,
                } => {
                    let xv = self.value(*x);
                    let mv = self.value(*mean);
                    let lvv = self.value(*log_var);
                    let n = xv.numel();
                    let mut gx = vec![0.0; n];
                    let mut glv_full = vec![0.0; n];
                    for k in 0..n {
                        let r = xv.data()[k] - mv.data()[mean_b.index(k)];
                        let inv = (-lvv.data()[lv_b.index(k)]).exp();
                        let gk = g.data()[k];
                        gx[k] = gk * r * inv;
                        glv_full[k] = gk * 0.5 * (1.0 - r * r * inv);
                    }
                    let gx = Tensor::new(xv.shape(), gx)?;
                    let gm = reduce_bcast(&gx.map(|v| -v), *mean_b, mv.shape());
                    let glv =
                        reduce_bcast(&Tensor::new(xv.shape(), glv_full)?, *lv_b, lvv.shape());
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *mean, gm);
                    accumulate(&mut grads, *log_var, glv);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, bc: Bcast, shape: &[usize]) -> Tensor {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::full(shape, g.sum()),
        Bcast::Row(c) => {
            let mut out = Tensor::zeros(shape);
            for (k, &v) in g.data().iter().enumerate() {
                out.data_mut()[k % c] += v;
            }
            out
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
