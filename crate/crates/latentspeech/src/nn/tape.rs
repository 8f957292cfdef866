//! Reverse-mode autodiff over a recorded computation graph.
//!
//! Every forward op appends a node to the [`Tape`]; `backward` walks the
//! nodes in reverse creation order (already topological) and accumulates
//! gradients. Tensors are value-semantic; a `Var` is an index into the tape.

use crate::dsp::spectral::MultiScaleSpec;
use crate::error::{LsError, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// `[C x L]` plus a per-channel bias `[C]` broadcast over L.
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    /// Row-wise affine map: x `[R x Din]`, w `[Dout x Din]`, b `[Dout]`.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f32,
    },
    Transpose(Var),
    MeanAll(Var),
    Mse(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        counts: Vec<usize>,
    },
    SliceRows {
        x: Var,
        from: usize,
    },
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<Var>),
    StopGrad,
    /// Multiscale spectral distance against a fixed target (scalar output).
    SpectralDistance {
        x: Var,
        target: Tensor,
        spec: MultiScaleSpec,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-var gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.0[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
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

    /// Leaf that participates in differentiation (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x * c).collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (c, l) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vb.numel(), c, "channel bias length mismatch");
        let mut data = vx.data.clone();
        for ch in 0..c {
            let b = vb.data[ch];
            for v in &mut data[ch * l..(ch + 1) * l] {
                *v += b;
            }
        }
        let t = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(bias);
        self.push(t, Op::AddChannelBias(x, bias), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = va.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let din = *vx.shape.last().unwrap();
        let (dout, din2) = (vw.shape[0], vw.shape[1]);
        assert_eq!(din, din2, "linear input dim mismatch");
        assert_eq!(vb.numel(), dout, "linear bias mismatch");
        let rows = vx.numel() / din;
        let mut out = vec![0.0f32; rows * dout];
        for r in 0..rows {
            let xr = &vx.data[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &vw.data[o * din..(o + 1) * din];
                let mut acc = 0.0f64;
                for i in 0..din {
                    acc += (xr[i] as f64) * (wr[i] as f64);
                }
                out[r * dout + o] = acc as f32 + vb.data[o];
            }
        }
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let t = Tensor { shape, data: out };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, Op::Linear { x, w, b }, ng)
    }

    /// 1-D convolution over `[C_in x L]` with symmetric zero padding.
    ///
    /// Output length is `ceil(L / stride)`; with stride 1 the output has the
    /// same length as the input. Kernel size must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, dilation: usize) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (cin, l) = (vx.shape[0], vx.shape[1]);
        let (cout, cin2, kk) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        if kk % 2 == 0 {
            return Err(LsError::Config(format!("conv1d kernel size {kk} must be odd")));
        }
        if cin != cin2 {
            return Err(LsError::Dimension(format!(
                "conv1d channels: input {cin}, weight expects {cin2}"
            )));
        }
        if vb.numel() != cout {
            return Err(LsError::Dimension("conv1d bias length".into()));
        }
        let pad = (kk - 1) / 2 * dilation;
        let span = (kk - 1) * dilation + 1;
        if span > l + 2 * pad {
            return Err(LsError::Dimension(format!(
                "conv1d kernel span {span} exceeds padded input {}",
                l + 2 * pad
            )));
        }
        let lout = l.div_ceil(stride);
        let mut out = vec![0.0f32; cout * lout];
        for co in 0..cout {
            let bias = vb.data[co];
            let orow = &mut out[co * lout..(co + 1) * lout];
            orow.iter_mut().for_each(|v| *v = bias);
            for ci in 0..cin {
                let xrow = &vx.data[ci * l..(ci + 1) * l];
                for k in 0..kk {
                    let wv = vw.data[(co * cin + ci) * kk + k];
                    let off = (k * dilation) as isize - pad as isize;
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let i = (o * stride) as isize + off;
                        if i >= 0 && (i as usize) < l {
                            *ov += wv * xrow[i as usize];
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![cout, lout],
            data: out,
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
            },
            ng,
        ))
    }

    /// Transposed 1-D convolution: `[C_in x L]` to `[C_out x L*stride]`.
    /// Weight layout `[C_in x C_out x K]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (cin, l) = (vx.shape[0], vx.shape[1]);
        let (cin2, cout, kk) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        if cin != cin2 {
            return Err(LsError::Dimension("conv_transpose1d channel mismatch".into()));
        }
        if vb.numel() != cout {
            return Err(LsError::Dimension("conv_transpose1d bias length".into()));
        }
        let lout = l * stride;
        let delta = (kk - 1) / 2 - stride / 2;
        let mut out = vec![0.0f32; cout * lout];
        for co in 0..cout {
            let bias = vb.data[co];
            out[co * lout..(co + 1) * lout]
                .iter_mut()
                .for_each(|v| *v = bias);
        }
        for ci in 0..cin {
            let xrow = &vx.data[ci * l..(ci + 1) * l];
            for co in 0..cout {
                let orow = &mut out[co * lout..(co + 1) * lout];
                for k in 0..kk {
                    let wv = vw.data[(ci * cout + co) * kk + k];
                    let off = k as isize - delta as isize;
                    for (li, &xv) in xrow.iter().enumerate() {
                        let o = (li * stride) as isize + off;
                        if o >= 0 && (o as usize) < lout {
                            orow[o as usize] += wv * xv;
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![cout, lout],
            data: out,
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::ConvT1d { x, w, b, stride }, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x.tanh()).collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
        };
        let ng = self.needs(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &va.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e as f64;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v = (*v as f64 / sum) as f32;
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Var {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = *vx.shape.last().unwrap();
        assert_eq!(vg.numel(), d);
        assert_eq!(vb.numel(), d);
        let rows = vx.numel() / d;
        let mut data = vec![0.0f32; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data[r * d..(r + 1) * d];
            let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = xr
                .iter()
                .map(|&v| {
                    let dv = v as f64 - mean;
                    dv * dv
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..d {
                let xhat = ((xr[j] as f64 - mean) * inv) as f32;
                data[r * d + j] = xhat * vg.data[j] + vb.data[j];
            }
        }
        let t = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(t, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transposed();
        let ng = self.needs(a);
        self.push(t, Op::Transpose(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let m = va.data.iter().map(|&v| v as f64).sum::<f64>() / va.numel() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(m as f32), Op::MeanAll(a), ng)
    }

    /// Mean squared error between two same-shape tensors (scalar).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "mse shape mismatch");
        let mut acc = 0.0f64;
        for (x, y) in va.data.iter().zip(&vb.data) {
            let d = (*x - *y) as f64;
            acc += d * d;
        }
        let v = acc / va.numel() as f64;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(v as f32), Op::Mse(a, b), ng)
    }

    /// Row lookup into an embedding table `[V x D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let (v, d) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(LsError::Input(format!(
                    "id {id} out of vocabulary bounds {v}"
                )));
            }
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let t = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let ng = self.needs(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Repeat row i of x `counts[i]` times (the length regulator).
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.shape[0], vx.shape[1]);
        if counts.len() != n {
            return Err(LsError::Dimension(format!(
                "repeat_rows: {n} rows vs {} counts",
                counts.len()
            )));
        }
        let m: usize = counts.iter().sum();
        if m == 0 {
            return Err(LsError::Input("all-zero durations".into()));
        }
        let mut data = Vec::with_capacity(m * d);
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                data.extend_from_slice(&vx.data[i * d..(i + 1) * d]);
            }
        }
        let t = Tensor {
            shape: vec![m, d],
            data,
        };
        let ng = self.needs(x);
        Ok(self.push(
            t,
            Op::RepeatRows {
                x,
                counts: counts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let c = vx.shape[1];
        let t = Tensor {
            shape: vec![to - from, c],
            data: vx.data[from * c..to * c].to_vec(),
        };
        let ng = self.needs(x);
        self.push(t, Op::SliceRows { x, from }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (r, c) = (vx.shape[0], vx.shape[1]);
        let w = to - from;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&vx.data[i * c + from..i * c + to]);
        }
        let t = Tensor {
            shape: vec![r, w],
            data,
        };
        let ng = self.needs(x);
        self.push(t, Op::SliceCols { x, from, to }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.nodes[parts[0].0].value.shape[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.shape[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let vp = &self.nodes[p.0].value;
                let c = vp.shape[1];
                data.extend_from_slice(&vp.data[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor {
            shape: vec![r, total],
            data,
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Pass-through that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.push(t, Op::StopGrad, false)
    }

    /// Multiscale spectral distance of x against a fixed target (scalar).
    pub fn spectral_distance(&mut self, x: Var, target: &Tensor, spec: &MultiScaleSpec) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape, target.shape, "spectral distance shape mismatch");
        let d = spec.distance(vx, target);
        let ng = self.needs(x);
        self.push(
            Tensor::scalar(d),
            Op::SpectralDistance {
                x,
                target: target.clone(),
                spec: spec.clone(),
            },
            ng,
        )
    }

    /// Run reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(LsError::Numeric("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let vb = &self.nodes[b.0].value;
                        let ga: Vec<f32> = g.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *a, &ga, 1.0);
                    }
                    if self.needs(*b) {
                        let va = &self.nodes[a.0].value;
                        let gb: Vec<f32> = g.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, *a, &g, *c);
                }
                Op::AddChannelBias(x, bias) => {
                    let (c, l) = (
                        self.nodes[x.0].value.shape[0],
                        self.nodes[x.0].value.shape[1],
                    );
                    self.acc(&mut grads, *x, &g, 1.0);
                    if self.needs(*bias) {
                        let mut gb = vec![0.0f32; c];
                        for ch in 0..c {
                            gb[ch] = g[ch * l..(ch + 1) * l].iter().map(|&v| v as f64).sum::<f64>()
                                as f32;
                        }
                        self.acc(&mut grads, *bias, &gb, 1.0);
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k) = (va.shape[0], va.shape[1]);
                    let n = vb.shape[1];
                    if self.needs(*a) {
                        // gA = g . B^T
                        let mut ga = vec![0.0f32; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &vb.data[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                let mut acc = 0.0f64;
                                for j in 0..n {
                                    acc += (grow[j] as f64) * (brow[j] as f64);
                                }
                                ga[i * k + p] = acc as f32;
                            }
                        }
                        self.acc(&mut grads, *a, &ga, 1.0);
                    }
                    if self.needs(*b) {
                        // gB = A^T . g
                        let mut gb = vec![0.0f32; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = va.data[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Linear { x, w, b } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (dout, din) = (vw.shape[0], vw.shape[1]);
                    let rows = vx.numel() / din;
                    if self.needs(*x) {
                        let mut gx = vec![0.0f32; vx.numel()];
                        for r in 0..rows {
                            let grow = &g[r * dout..(r + 1) * dout];
                            let xrow = &mut gx[r * din..(r + 1) * din];
                            for o in 0..dout {
                                let gv = grow[o];
                                if gv == 0.0 {
                                    continue;
                                }
                                let wrow = &vw.data[o * din..(o + 1) * din];
                                for i in 0..din {
                                    xrow[i] += gv * wrow[i];
                                }
                            }
                        }
                        self.acc(&mut grads, *x, &gx, 1.0);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0f32; dout * din];
                        for r in 0..rows {
                            let grow = &g[r * dout..(r + 1) * dout];
                            let xrow = &vx.data[r * din..(r + 1) * din];
                            for o in 0..dout {
                                let gv = grow[o];
                                if gv == 0.0 {
                                    continue;
                                }
                                let wrow = &mut gw[o * din..(o + 1) * din];
                                for i in 0..din {
                                    wrow[i] += gv * xrow[i];
                                }
                            }
                        }
                        self.acc(&mut grads, *w, &gw, 1.0);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; dout];
                        for r in 0..rows {
                            for o in 0..dout {
                                gb[o] += g[r * dout + o];
                            }
                        }
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    dilation,
                } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (cin, l) = (vx.shape[0], vx.shape[1]);
                    let (cout, _, kk) = (vw.shape[0], vw.shape[1], vw.shape[2]);
                    let pad = (kk - 1) / 2 * dilation;
                    let lout = l.div_ceil(*stride);
                    if self.needs(*x) {
                        let mut gx = vec![0.0f32; cin * l];
                        for co in 0..cout {
                            let grow = &g[co * lout..(co + 1) * lout];
                            for ci in 0..cin {
                                let xg = &mut gx[ci * l..(ci + 1) * l];
                                for k in 0..kk {
                                    let wv = vw.data[(co * cin + ci) * kk + k];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = (k * dilation) as isize - pad as isize;
                                    for (o, &gv) in grow.iter().enumerate() {
                                        let i = (o * stride) as isize + off;
                                        if i >= 0 && (i as usize) < l {
                                            xg[i as usize] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                        self.acc(&mut grads, *x, &gx, 1.0);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0f32; vw.numel()];
                        for co in 0..cout {
                            let grow = &g[co * lout..(co + 1) * lout];
                            for ci in 0..cin {
                                let xrow = &vx.data[ci * l..(ci + 1) * l];
                                for k in 0..kk {
                                    let off = (k * dilation) as isize - pad as isize;
                                    let mut acc = 0.0f64;
                                    for (o, &gv) in grow.iter().enumerate() {
                                        let i = (o * stride) as isize + off;
                                        if i >= 0 && (i as usize) < l {
                                            acc += (gv as f64) * (xrow[i as usize] as f64);
                                        }
                                    }
                                    gw[(co * cin + ci) * kk + k] += acc as f32;
                                }
                            }
                        }
                        self.acc(&mut grads, *w, &gw, 1.0);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; cout];
                        for co in 0..cout {
                            gb[co] = g[co * lout..(co + 1) * lout]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>() as f32;
                        }
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::ConvT1d { x, w, b, stride } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (cin, l) = (vx.shape[0], vx.shape[1]);
                    let (_, cout, kk) = (vw.shape[0], vw.shape[1], vw.shape[2]);
                    let lout = l * stride;
                    let delta = (kk - 1) / 2 - stride / 2;
                    if self.needs(*x) {
                        let mut gx = vec![0.0f32; cin * l];
                        for ci in 0..cin {
                            let xg = &mut gx[ci * l..(ci + 1) * l];
                            for co in 0..cout {
                                let grow = &g[co * lout..(co + 1) * lout];
                                for k in 0..kk {
                                    let wv = vw.data[(ci * cout + co) * kk + k];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = k as isize - delta as isize;
                                    for (li, xv) in xg.iter_mut().enumerate() {
                                        let o = (li * stride) as isize + off;
                                        if o >= 0 && (o as usize) < lout {
                                            *xv += wv * grow[o as usize];
                                        }
                                    }
                                }
                            }
                        }
                        self.acc(&mut grads, *x, &gx, 1.0);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0f32; vw.numel()];
                        for ci in 0..cin {
                            let xrow = &vx.data[ci * l..(ci + 1) * l];
                            for co in 0..cout {
                                let grow = &g[co * lout..(co + 1) * lout];
                                for k in 0..kk {
                                    let off = k as isize - delta as isize;
                                    let mut acc = 0.0f64;
                                    for (li, &xv) in xrow.iter().enumerate() {
                                        let o = (li * stride) as isize + off;
                                        if o >= 0 && (o as usize) < lout {
                                            acc += (xv as f64) * (grow[o as usize] as f64);
                                        }
                                    }
                                    gw[(ci * cout + co) * kk + k] += acc as f32;
                                }
                            }
                        }
                        self.acc(&mut grads, *w, &gw, 1.0);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0f32; cout];
                        for co in 0..cout {
                            gb[co] = g[co * lout..(co + 1) * lout]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>() as f32;
                        }
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga: Vec<f32> = g
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga: Vec<f32> = g
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::Relu(a) => {
                    let vx = &self.nodes[a.0].value;
                    let ga: Vec<f32> = g
                        .iter()
                        .zip(&vx.data)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::LeakyRelu(a, slope) => {
                    let vx = &self.nodes[a.0].value;
                    let ga: Vec<f32> = g
                        .iter()
                        .zip(&vx.data)
                        .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                        .collect();
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = (y.shape[0], y.shape[1]);
                    let mut ga = vec![0.0f32; r * c];
                    for i in 0..r {
                        let yrow = &y.data[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = yrow
                            .iter()
                            .zip(grow)
                            .map(|(&yv, &gv)| (yv as f64) * (gv as f64))
                            .sum();
                        for j in 0..c {
                            ga[i * c + j] = yrow[j] * (grow[j] - dot as f32);
                        }
                    }
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let vx = &self.nodes[x.0].value;
                    let vg = &self.nodes[gain.0].value;
                    let d = *vx.shape.last().unwrap();
                    let rows = vx.numel() / d;
                    let mut gx = vec![0.0f32; vx.numel()];
                    let mut gg = vec![0.0f64; d];
                    let mut gb = vec![0.0f64; d];
                    for r in 0..rows {
                        let xr = &vx.data[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                        let var = xr
                            .iter()
                            .map(|&v| {
                                let dv = v as f64 - mean;
                                dv * dv
                            })
                            .sum::<f64>()
                            / d as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        let xhat: Vec<f64> =
                            xr.iter().map(|&v| (v as f64 - mean) * inv).collect();
                        let ghat: Vec<f64> = (0..d)
                            .map(|j| grow[j] as f64 * vg.data[j] as f64)
                            .collect();
                        let mg = ghat.iter().sum::<f64>() / d as f64;
                        let mgx = ghat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = (inv * (ghat[j] - mg - xhat[j] * mgx)) as f32;
                            gg[j] += grow[j] as f64 * xhat[j];
                            gb[j] += grow[j] as f64;
                        }
                    }
                    self.acc(&mut grads, *x, &gx, 1.0);
                    if self.needs(*gain) {
                        let v: Vec<f32> = gg.iter().map(|&v| v as f32).collect();
                        self.acc(&mut grads, *gain, &v, 1.0);
                    }
                    if self.needs(*bias) {
                        let v: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                        self.acc(&mut grads, *bias, &v, 1.0);
                    }
                }
                Op::Transpose(a) => {
                    let y = &node.value;
                    let (r, c) = (y.shape[0], y.shape[1]);
                    let mut ga = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = g[i * c + j];
                        }
                    }
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let gv = g[0] / n as f32;
                    let ga = vec![gv; n];
                    self.acc(&mut grads, *a, &ga, 1.0);
                }
                Op::Mse(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let n = va.numel() as f32;
                    let c = 2.0 * g[0] / n;
                    if self.needs(*a) {
                        let ga: Vec<f32> = va
                            .data
                            .iter()
                            .zip(&vb.data)
                            .map(|(x, y)| c * (x - y))
                            .collect();
                        self.acc(&mut grads, *a, &ga, 1.0);
                    }
                    if self.needs(*b) {
                        let gb: Vec<f32> = va
                            .data
                            .iter()
                            .zip(&vb.data)
                            .map(|(x, y)| -c * (x - y))
                            .collect();
                        self.acc(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Gather { table, ids } => {
                    let vt = &self.nodes[table.0].value;
                    let d = vt.shape[1];
                    let mut gt = vec![0.0f32; vt.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                    self.acc(&mut grads, *table, &gt, 1.0);
                }
                Op::RepeatRows { x, counts } => {
                    let vx = &self.nodes[x.0].value;
                    let d = vx.shape[1];
                    let mut gx = vec![0.0f32; vx.numel()];
                    let mut row = 0usize;
                    for (i, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            for j in 0..d {
                                gx[i * d + j] += g[row * d + j];
                            }
                            row += 1;
                        }
                    }
                    self.acc(&mut grads, *x, &gx, 1.0);
                }
                Op::SliceRows { x, from } => {
                    let vx = &self.nodes[x.0].value;
                    let c = vx.shape[1];
                    let mut gx = vec![0.0f32; vx.numel()];
                    gx[from * c..from * c + g.len()].copy_from_slice(&g);
                    self.acc(&mut grads, *x, &gx, 1.0);
                }
                Op::SliceCols { x, from, to } => {
                    let vx = &self.nodes[x.0].value;
                    let (r, c) = (vx.shape[0], vx.shape[1]);
                    let w = to - from;
                    let mut gx = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + from + j] = g[i * w + j];
                        }
                    }
                    self.acc(&mut grads, *x, &gx, 1.0);
                }
                Op::ConcatCols(parts) => {
                    let r = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0usize;
                    for p in parts {
                        let c = self.nodes[p.0].value.shape[1];
                        if self.needs(*p) {
                            let mut gp = vec![0.0f32; r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    gp[i * c + j] = g[i * total + offset + j];
                                }
                            }
                            self.acc(&mut grads, *p, &gp, 1.0);
                        }
                        offset += c;
                    }
                }
                Op::StopGrad => {}
                Op::SpectralDistance { x, target, spec } => {
                    let vx = &self.nodes[x.0].value;
                    let gx = spec.distance_grad(vx, target);
                    self.acc(&mut grads, *x, &gx.data, g[0]);
                }
            }
            grads[idx] = Some(g);
        }

        for go in grads.iter().flatten() {
            if go.iter().any(|v| !v.is_finite()) {
                return Err(LsError::Numeric("non-finite gradient".into()));
            }
        }
        Ok(Grads(grads))
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: &[f32], scale: f32) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c * scale;
                }
            }
            None => {
                if scale == 1.0 {
                    *slot = Some(contrib.to_vec());
                } else {
                    *slot = Some(contrib.iter().map(|c| c * scale).collect());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn conv1d_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[vec![0.5, -1.0, 2.0, 3.0, 0.25]]));
        let w = tape.param(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = tape.param(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, -1.0, 2.0, 3.0, 0.25]);
    }

    #[test]
    fn conv1d_same_padding_shape_law() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 8]));
        let w = tape.param(Tensor::zeros(&[4, 2, 3]));
        let b = tape.param(Tensor::zeros(&[4]));
        let y = tape.conv1d(x, w, b, 1, 2).unwrap();
        assert_eq!(tape.value(y).shape, vec![4, 8]);
    }

    #[test]
    fn conv1d_dilated_impulse_response() {
        // input delta at position 2, K=3, dilation=2, weight [a,b,c]
        let (a, b, c) = (0.3f32, -0.7, 1.9);
        let mut tape = Tape::new();
        let x = tape.param(t2(&[vec![0.0, 0.0, 1.0, 0.0, 0.0]]));
        let w = tape.param(Tensor::new(vec![1, 1, 3], vec![a, b, c]).unwrap());
        let bias = tape.param(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, bias, 1, 2).unwrap();
        let got = &tape.value(y).data;
        let want = [c, 0.0, b, 0.0, a];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-7, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[1, 8]));
        let w = tape.param(Tensor::zeros(&[1, 1, 4]));
        let b = tape.param(Tensor::zeros(&[1]));
        assert!(tape.conv1d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn conv1d_linearity() {
        let mk = |scale_a: f32, scale_b: f32| -> Vec<f32> {
            let mut tape = Tape::new();
            let xa: Vec<f32> = (0..12).map(|i| (i as f32 * 0.7).sin()).collect();
            let xb: Vec<f32> = (0..12).map(|i| (i as f32 * 1.3).cos()).collect();
            let mixed: Vec<f32> = xa
                .iter()
                .zip(&xb)
                .map(|(a, b)| scale_a * a + scale_b * b)
                .collect();
            let x = tape.param(Tensor::new(vec![1, 12], mixed).unwrap());
            let w = tape.param(Tensor::new(vec![1, 1, 3], vec![0.2, -0.5, 0.9]).unwrap());
            let bias = tape.param(Tensor::zeros(&[1]));
            let y = tape.conv1d(x, w, bias, 1, 1).unwrap();
            tape.value(y).data.clone()
        };
        let ya = mk(1.0, 0.0);
        let yb = mk(0.0, 1.0);
        let ymix = mk(2.0, -3.0);
        for i in 0..ya.len() {
            let want = 2.0 * ya[i] - 3.0 * yb[i];
            assert!((ymix[i] - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[vec![1.0, 2.0, 3.0]]));
        let eye = tape.param(t2(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let b0 = tape.param(Tensor::zeros(&[3]));
        let y = tape.linear(x, eye, b0);
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0]);

        let wz = tape.param(Tensor::zeros(&[2, 3]));
        let b5 = tape.param(Tensor::full(&[2], 5.0));
        let y2 = tape.linear(x, wz, b5);
        assert_eq!(tape.value(y2).data, vec![5.0, 5.0]);
    }

    #[test]
    fn linear_hand_product() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[vec![2.0, 3.0]]));
        let w = tape.param(t2(&[vec![1.0, 1.0], vec![1.0, -1.0]]));
        let b = tape.param(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data, vec![5.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[vec![0.1, 2.0, -1.0], vec![5.0, 5.0, 5.0]]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        for r in 0..2 {
            let s: f32 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn repeat_rows_expansion() {
        let mut tape = Tape::new();
        let h = tape.param(t2(&[vec![1.0, 1.5], vec![2.0, 2.5]]));
        let y = tape.repeat_rows(h, &[2, 3]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape, vec![5, 2]);
        assert_eq!(v.row(0), &[1.0, 1.5]);
        assert_eq!(v.row(1), &[1.0, 1.5]);
        assert_eq!(v.row(2), &[2.0, 2.5]);
        assert_eq!(v.row(4), &[2.0, 2.5]);
    }

    #[test]
    fn repeat_rows_all_zero_is_error() {
        let mut tape = Tape::new();
        let h = tape.param(t2(&[vec![1.0], vec![2.0]]));
        assert!(tape.repeat_rows(h, &[0, 0]).is_err());
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.stop_grad(x);
        let loss = tape.mse(y, y);
        // mse(y,y)=0 and nothing reaches x
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn mse_backward_matches_closed_form() {
        let mut tape = Tape::new();
        let a = tape.param(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![0.0, 0.0]]));
        let loss = tape.mse(a, b);
        assert!((tape.scalar_value(loss) - 2.5).abs() < 1e-6);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(a).unwrap();
        // d/da mean((a-b)^2) = 2(a-b)/n = [1, 2]
        assert!((ga[0] - 1.0).abs() < 1e-6);
        assert!((ga[1] - 2.0).abs() < 1e-6);
    }
}
