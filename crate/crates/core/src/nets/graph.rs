//! A small reverse-mode tape over channels-last tensors.
//!
//! Parameters live in one flat `f64` buffer; layer specs carry offsets into
//! it. A [`Graph`] records every forward op so [`Graph::backward`] can
//! accumulate parameter gradients into a buffer of the same length.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weight layout `[cout][kernel][cin]`.
    pub weight: usize,
    pub bias: usize,
}

impl Conv1d {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.kernel * self.cin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weight layout `[cout][kh][kw][cin]`.
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    /// Weight layout `[fout][fin]`.
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

const GN_EPS: f64 = 1e-5;

/// Allocates and initializes parameters.
pub struct ParamBuilder<'r> {
    pub values: Vec<f64>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        ParamBuilder { values: Vec::new(), rng }
    }

    fn alloc_uniform(&mut self, n: usize, bound: f64) -> usize {
        let off = self.values.len();
        for _ in 0..n {
            let v = if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 };
            self.values.push(v);
        }
        off
    }

    fn alloc_const(&mut self, n: usize, v: f64) -> usize {
        let off = self.values.len();
        self.values.resize(off + n, v);
        off
    }

    pub fn conv1d(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv1d {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Conv1d {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: self.alloc_uniform(cout * kernel * cin, bound),
            bias: self.alloc_uniform(cout, bound),
        }
    }

    pub fn conv1d_zero(&mut self, cin: usize, cout: usize, kernel: usize) -> Conv1d {
        Conv1d {
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
            weight: self.alloc_const(cout * kernel * cin, 0.0),
            bias: self.alloc_const(cout, 0.0),
        }
    }

    pub fn conv2d(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv2d {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: self.alloc_uniform(cout * kernel * kernel * cin, bound),
            bias: self.alloc_uniform(cout, bound),
        }
    }

    pub fn linear(&mut self, fin: usize, fout: usize) -> Linear {
        let bound = 1.0 / (fin as f64).sqrt();
        Linear {
            fin,
            fout,
            weight: self.alloc_uniform(fout * fin, bound),
            bias: self.alloc_uniform(fout, bound),
        }
    }

    pub fn group_norm(&mut self, channels: usize, groups: usize) -> GroupNorm {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            channels,
            groups,
            gamma: self.alloc_const(channels, 1.0),
            beta: self.alloc_const(channels, 0.0),
        }
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * ars + (k - 1) * acs);
        assert!(b.len() > (k - 1) * brs + (n - 1) * bcs);
    }
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor shape {shape:?}");
        Tensor { data, shape }
    }

    fn last(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

enum Op {
    Input,
    Conv1d(NodeId, Conv1d),
    Conv2d(NodeId, Conv2d),
    Linear(NodeId, Linear),
    GroupNorm {
        x: NodeId,
        spec: GroupNorm,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(NodeId),
    Add(NodeId, NodeId),
    ChannelBias(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Upsample(NodeId),
    Reshape(NodeId),
}

/// Forward tape bound to a parameter buffer.
pub struct Graph<'p> {
    params: &'p [f64],
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

fn im2col_1d(x: &Tensor, spec: &Conv1d) -> (Vec<f64>, usize) {
    let (b, len, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let lout = spec.out_len(len);
    let patch = spec.patch();
    let mut cols = vec![0.0; b * lout * patch];
    for bi in 0..b {
        for lo in 0..lout {
            let row = &mut cols[(bi * lout + lo) * patch..][..patch];
            for kk in 0..spec.kernel {
                let li = (lo * spec.stride + kk) as isize - spec.pad as isize;
                if li >= 0 && (li as usize) < len {
                    let src = &x.data[(bi * len + li as usize) * cin..][..cin];
                    row[kk * cin..(kk + 1) * cin].copy_from_slice(src);
                }
            }
        }
    }
    (cols, lout)
}

fn col2im_1d(dcols: &[f64], spec: &Conv1d, shape: &[usize], dx: &mut [f64]) {
    let (b, len, cin) = (shape[0], shape[1], shape[2]);
    let lout = spec.out_len(len);
    let patch = spec.patch();
    for bi in 0..b {
        for lo in 0..lout {
            let row = &dcols[(bi * lout + lo) * patch..][..patch];
            for kk in 0..spec.kernel {
                let li = (lo * spec.stride + kk) as isize - spec.pad as isize;
                if li >= 0 && (li as usize) < len {
                    let dst = &mut dx[(bi * len + li as usize) * cin..][..cin];
                    for (d, s) in dst.iter_mut().zip(&row[kk * cin..(kk + 1) * cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn im2col_2d(x: &Tensor, spec: &Conv2d) -> (Vec<f64>, usize, usize) {
    let (b, h, w, cin) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let patch = spec.patch();
    let mut cols = vec![0.0; b * ho * wo * patch];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[((bi * ho + oy) * wo + ox) * patch..][..patch];
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let src = &x.data[((bi * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        let at = (ky * spec.kernel + kx) * cin;
                        row[at..at + cin].copy_from_slice(src);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im_2d(dcols: &[f64], spec: &Conv2d, shape: &[usize], dx: &mut [f64]) {
    let (b, h, w, cin) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let patch = spec.patch();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &dcols[((bi * ho + oy) * wo + ox) * patch..][..patch];
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let dst = &mut dx[((bi * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        let at = (ky * spec.kernel + kx) * cin;
                        for (d, s) in dst.iter_mut().zip(&row[at..at + cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `y[rows, cout] = cols[rows, patch] * W^T + bias`.
fn affine_forward(params: &[f64], cols: &[f64], rows: usize, patch: usize, cout: usize, weight: usize, bias: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cout];
    for r in 0..rows {
        y[r * cout..(r + 1) * cout].copy_from_slice(&params[bias..bias + cout]);
    }
    let w = &params[weight..weight + cout * patch];
    gemm(rows, patch, cout, cols, (patch, 1), w, (1, patch), 1.0, &mut y);
    y
}

/// Accumulates weight/bias gradients and returns `d cols`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    params: &[f64],
    grads: &mut [f64],
    cols: &[f64],
    dy: &[f64],
    rows: usize,
    patch: usize,
    cout: usize,
    weight: usize,
    bias: usize,
) -> Vec<f64> {
    gemm(cout, rows, patch, dy, (1, cout), cols, (patch, 1), 1.0, &mut grads[weight..weight + cout * patch]);
    let db = &mut grads[bias..bias + cout];
    for r in 0..rows {
        for (d, g) in db.iter_mut().zip(&dy[r * cout..(r + 1) * cout]) {
            *d += g;
        }
    }
    let mut dcols = vec![0.0; rows * patch];
    gemm(rows, cout, patch, dy, (cout, 1), &params[weight..weight + cout * patch], (patch, 1), 0.0, &mut dcols);
    dcols
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Graph {
            params,
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// `x: [B, L, cin] -> [B, L', cout]`.
    pub fn conv1d(&mut self, x: NodeId, spec: Conv1d) -> NodeId {
        let xv = &self.values[x];
        assert_eq!(xv.last(), spec.cin, "conv1d input channels");
        let b = xv.shape[0];
        let (cols, lout) = im2col_1d(xv, &spec);
        let y = affine_forward(self.params, &cols, b * lout, spec.patch(), spec.cout, spec.weight, spec.bias);
        self.push(Tensor::new(y, vec![b, lout, spec.cout]), Op::Conv1d(x, spec))
    }

    /// `x: [B, H, W, cin] -> [B, H', W', cout]`.
    pub fn conv2d(&mut self, x: NodeId, spec: Conv2d) -> NodeId {
        let xv = &self.values[x];
        assert_eq!(xv.last(), spec.cin, "conv2d input channels");
        let b = xv.shape[0];
        let (cols, ho, wo) = im2col_2d(xv, &spec);
        let y = affine_forward(self.params, &cols, b * ho * wo, spec.patch(), spec.cout, spec.weight, spec.bias);
        self.push(Tensor::new(y, vec![b, ho, wo, spec.cout]), Op::Conv2d(x, spec))
    }

    /// Applies along the last axis.
    pub fn linear(&mut self, x: NodeId, spec: Linear) -> NodeId {
        let xv = &self.values[x];
        assert_eq!(xv.last(), spec.fin, "linear input features");
        let rows = xv.data.len() / spec.fin;
        let y = affine_forward(self.params, &xv.data, rows, spec.fin, spec.fout, spec.weight, spec.bias);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = spec.fout;
        self.push(Tensor::new(y, shape), Op::Linear(x, spec))
    }

    /// Normalizes each (sample, group) over all positions and the group's channels.
    pub fn group_norm(&mut self, x: NodeId, spec: GroupNorm) -> NodeId {
        let xv = &self.values[x];
        let c = spec.channels;
        assert_eq!(xv.last(), c, "group norm channels");
        let b = xv.shape[0];
        let pos = xv.data.len() / (b * c);
        let cg = c / spec.groups;
        let n = (pos * cg) as f64;
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; b * spec.groups];
        for bi in 0..b {
            for g in 0..spec.groups {
                let mut mean = 0.0;
                for p in 0..pos {
                    let base = (bi * pos + p) * c + g * cg;
                    mean += xv.data[base..base + cg].iter().sum::<f64>();
                }
                mean /= n;
                let mut var = 0.0;
                for p in 0..pos {
                    let base = (bi * pos + p) * c + g * cg;
                    var += xv.data[base..base + cg].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                var /= n;
                let is = 1.0 / (var + GN_EPS).sqrt();
                inv_std[bi * spec.groups + g] = is;
                for p in 0..pos {
                    let base = (bi * pos + p) * c + g * cg;
                    for k in base..base + cg {
                        xhat[k] = (xv.data[k] - mean) * is;
                    }
                }
            }
        }
        let gamma = &self.params[spec.gamma..spec.gamma + c];
        let beta = &self.params[spec.beta..spec.beta + c];
        let y = xhat
            .iter()
            .enumerate()
            .map(|(k, v)| gamma[k % c] * v + beta[k % c])
            .collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(y, shape), Op::GroupNorm { x, spec, xhat, inv_std })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x];
        let y = xv.data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(y, shape), Op::Silu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.values[a], &self.values[b]);
        assert_eq!(av.shape, bv.shape, "add operands");
        let y = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(y, shape), Op::Add(a, b))
    }

    /// `x: [B, ..., C] + bias: [B, C]` broadcast over the middle axes.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (&self.values[x], &self.values[bias]);
        let (b, c) = (xv.shape[0], xv.last());
        assert_eq!(bv.shape, vec![b, c], "channel bias shape");
        let per = xv.data.len() / b;
        let y = xv
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v + bv.data[(k / per) * c + k % c])
            .collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(y, shape), Op::ChannelBias(x, bias))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let lead: Vec<usize> = {
            let s = &self.values[parts[0]].shape;
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.values[p].last()).collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; rows * total];
        let mut at = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.values[p];
            assert_eq!(&v.shape[..v.shape.len() - 1], lead.as_slice(), "concat leading dims");
            for r in 0..rows {
                y[r * total + at..r * total + at + w].copy_from_slice(&v.data[r * w..(r + 1) * w]);
            }
            at += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(y, shape), Op::Concat(parts.to_vec()))
    }

    /// Nearest-neighbour upsampling `[B, L, C] -> [B, out_len, C]` with
    /// `out[i] = in[i / 2]`.
    pub fn upsample(&mut self, x: NodeId, out_len: usize) -> NodeId {
        let xv = &self.values[x];
        let (b, len, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert_eq!(len, out_len.div_ceil(2), "upsample length");
        let mut y = vec![0.0; b * out_len * c];
        for bi in 0..b {
            for i in 0..out_len {
                let src = &xv.data[(bi * len + i / 2) * c..][..c];
                y[(bi * out_len + i) * c..][..c].copy_from_slice(src);
            }
        }
        self.push(Tensor::new(y, vec![b, out_len, c]), Op::Upsample(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let data = self.values[x].data.clone();
        self.push(Tensor::new(data, shape), Op::Reshape(x))
    }

    /// Back-propagates `grad_out` from `output`, accumulating parameter
    /// gradients into `param_grads`. Returns gradients for every node
    /// (`None` where no gradient flowed).
    pub fn backward(&self, output: NodeId, grad_out: Vec<f64>, param_grads: &mut [f64]) -> Vec<Option<Vec<f64>>> {
        assert_eq!(param_grads.len(), self.params.len());
        assert_eq!(grad_out.len(), self.values[output].data.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[output] = Some(grad_out);
        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Conv1d(x, spec) => {
                    let xv = &self.values[*x];
                    let (cols, lout) = im2col_1d(xv, spec);
                    let rows = xv.shape[0] * lout;
                    let dcols = affine_backward(self.params, param_grads, &cols, &dy, rows, spec.patch(), spec.cout, spec.weight, spec.bias);
                    let dx = slot(&mut grads, *x, xv.data.len());
                    col2im_1d(&dcols, spec, &xv.shape, dx);
                }
                Op::Conv2d(x, spec) => {
                    let xv = &self.values[*x];
                    let (cols, ho, wo) = im2col_2d(xv, spec);
                    let rows = xv.shape[0] * ho * wo;
                    let dcols = affine_backward(self.params, param_grads, &cols, &dy, rows, spec.patch(), spec.cout, spec.weight, spec.bias);
                    let dx = slot(&mut grads, *x, xv.data.len());
                    col2im_2d(&dcols, spec, &xv.shape, dx);
                }
                Op::Linear(x, spec) => {
                    let xv = &self.values[*x];
                    let rows = xv.data.len() / spec.fin;
                    let dcols = affine_backward(self.params, param_grads, &xv.data, &dy, rows, spec.fin, spec.fout, spec.weight, spec.bias);
                    accumulate(slot(&mut grads, *x, xv.data.len()), &dcols);
                }
                Op::GroupNorm { x, spec, xhat, inv_std } => {
                    let c = spec.channels;
                    let b = self.values[*x].shape[0];
                    let pos = xhat.len() / (b * c);
                    let cg = c / spec.groups;
                    let n = (pos * cg) as f64;
                    let gamma = &self.params[spec.gamma..spec.gamma + c];
                    for (k, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                        param_grads[spec.gamma + k % c] += g * xh;
                        param_grads[spec.beta + k % c] += g;
                    }
                    let dx = slot(&mut grads, *x, xhat.len());
                    for bi in 0..b {
                        for g in 0..spec.groups {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for p in 0..pos {
                                let base = (bi * pos + p) * c + g * cg;
                                for k in base..base + cg {
                                    let d = dy[k] * gamma[k % c];
                                    s1 += d;
                                    s2 += d * xhat[k];
                                }
                            }
                            let is = inv_std[bi * spec.groups + g];
                            for p in 0..pos {
                                let base = (bi * pos + p) * c + g * cg;
                                for k in base..base + cg {
                                    let d = dy[k] * gamma[k % c];
                                    dx[k] += is * (d - s1 / n - xhat[k] * s2 / n);
                                }
                            }
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = &self.values[*x];
                    let dx = slot(&mut grads, *x, xv.data.len());
                    for ((d, &v), g) in dx.iter_mut().zip(&xv.data).zip(&dy) {
                        let s = sigmoid(v);
                        *d += g * s * (1.0 + v * (1.0 - s));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, *a, dy.len()), &dy);
                    accumulate(slot(&mut grads, *b, dy.len()), &dy);
                }
                Op::ChannelBias(x, bias) => {
                    let shape = &self.values[*x].shape;
                    let (b, c) = (shape[0], *shape.last().unwrap());
                    let per = dy.len() / b;
                    accumulate(slot(&mut grads, *x, dy.len()), &dy);
                    let db = slot(&mut grads, *bias, b * c);
                    for (k, g) in dy.iter().enumerate() {
                        db[(k / per) * c + k % c] += g;
                    }
                }
                Op::Concat(parts) => {
                    let total = self.values[id].last();
                    let rows = dy.len() / total;
                    let mut at = 0;
                    for &p in parts {
                        let w = self.values[p].last();
                        let dp = slot(&mut grads, p, rows * w);
                        for r in 0..rows {
                            for (d, g) in dp[r * w..(r + 1) * w].iter_mut().zip(&dy[r * total + at..r * total + at + w]) {
                                *d += g;
                            }
                        }
                        at += w;
                    }
                }
                Op::Upsample(x) => {
                    let xs = &self.values[*x].shape;
                    let (b, len, c) = (xs[0], xs[1], xs[2]);
                    let out_len = self.values[id].shape[1];
                    let dx = slot(&mut grads, *x, b * len * c);
                    for bi in 0..b {
                        for i in 0..out_len {
                            let src = &dy[(bi * out_len + i) * c..][..c];
                            for (d, g) in dx[(bi * len + i / 2) * c..][..c].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Reshape(x) => accumulate(slot(&mut grads, *x, dy.len()), &dy),
            }
            grads[id] = Some(dy);
        }
        grads
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Central-difference check of d(sum(w * out))/d(params and input).
    fn check_op(build: impl Fn(&mut Graph, NodeId) -> NodeId, params: Vec<f64>, input: Tensor) {
        let mut rng = seed::rng(99);
        let probe = {
            let mut g = Graph::new(&params);
            let x = g.input(input.clone());
            let y = build(&mut g, x);
            g.value(y).data.len()
        };
        let w: Vec<f64> = (0..probe).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], inp: &Tensor| {
            let mut g = Graph::new(p);
            let x = g.input(inp.clone());
            let y = build(&mut g, x);
            g.value(y).data.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut pg = vec![0.0; params.len()];
        let (dx, _) = {
            let mut g = Graph::new(&params);
            let x = g.input(input.clone());
            let y = build(&mut g, x);
            let grads = g.backward(y, w.clone(), &mut pg);
            (grads[x].clone().unwrap_or_else(|| vec![0.0; input.data.len()]), y)
        };
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = objective(&p, &input);
            p[i] -= 2.0 * h;
            let down = objective(&p, &input);
            let num = (up - down) / (2.0 * h);
            assert!(rel(pg[i], num) < 1e-6, "param {i}: analytic {} numeric {num}", pg[i]);
        }
        for i in 0..input.data.len() {
            let mut inp = input.clone();
            inp.data[i] += h;
            let up = objective(&params, &inp);
            inp.data[i] -= 2.0 * h;
            let down = objective(&params, &inp);
            let num = (up - down) / (2.0 * h);
            assert!(rel(dx[i], num) < 1e-6, "input {i}: analytic {} numeric {num}", dx[i]);
        }
    }

    fn random_tensor(shape: Vec<usize>, s: u64) -> Tensor {
        let mut rng = seed::rng(s);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn conv1d_gradients() {
        for stride in [1, 2] {
            let mut rng = seed::rng(1);
            let mut pb = ParamBuilder::new(&mut rng);
            let spec = pb.conv1d(3, 4, 3, stride);
            check_op(move |g, x| g.conv1d(x, spec), pb.values, random_tensor(vec![2, 7, 3], 2));
        }
    }

    #[test]
    fn conv1d_matches_direct_convolution() {
        let mut rng = seed::rng(5);
        let mut pb = ParamBuilder::new(&mut rng);
        let spec = pb.conv1d(2, 3, 3, 2);
        let params = pb.values;
        let x = random_tensor(vec![1, 5, 2], 6);
        let mut g = Graph::new(&params);
        let xi = g.input(x.clone());
        let y = g.conv1d(xi, spec);
        let out = g.value(y);
        assert_eq!(out.shape, vec![1, 3, 3]);
        for lo in 0..3 {
            for co in 0..3 {
                let mut acc = params[spec.bias + co];
                for kk in 0..3 {
                    let li = (lo * 2 + kk) as isize - 1;
                    if (0..5).contains(&li) {
                        for ci in 0..2 {
                            acc += params[spec.weight + (co * 3 + kk) * 2 + ci] * x.data[li as usize * 2 + ci];
                        }
                    }
                }
                assert!((out.data[lo * 3 + co] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = seed::rng(3);
        let mut pb = ParamBuilder::new(&mut rng);
        let spec = pb.conv2d(2, 3, 3, 2);
        check_op(move |g, x| g.conv2d(x, spec), pb.values, random_tensor(vec![2, 5, 4, 2], 4));
    }

    #[test]
    fn group_norm_silu_gradients() {
        let mut rng = seed::rng(7);
        let mut pb = ParamBuilder::new(&mut rng);
        let gn = pb.group_norm(4, 2);
        let mut params = pb.values;
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.1 * (i as f64).sin();
        }
        check_op(
            move |g, x| {
                let y = g.group_norm(x, gn);
                g.silu(y)
            },
            params,
            random_tensor(vec![2, 3, 4], 8),
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = seed::rng(11);
        let mut pb = ParamBuilder::new(&mut rng);
        let lin = pb.linear(9, 6);
        let params = pb.values;
        check_op(
            move |g, x| {
                let up = g.upsample(x, 5);
                let doubled = g.add(up, up);
                let cat = g.concat(&[up, doubled]);
                let summed = g.add(cat, cat);
                let flat = g.reshape(x, vec![2, 9]);
                let bias = g.linear(flat, lin);
                g.channel_bias(summed, bias)
            },
            params,
            random_tensor(vec![2, 3, 3], 12),
        );
    }
}
