//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Each node keeps its
//! value plus a closure that maps the output gradient to input gradients.
//! [`Tape::backward`] walks the nodes in reverse and accumulates.

use crate::tensor::{self, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Tensor>> + Send>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&BackwardCtx) -> Vec<Option<Tensor>> + Send + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Grads(grads)
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape(), data);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape(), data);
        self.push(out, &[a, b], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape(), data);
        self.push(out, &[a, b], |c| {
            let ga = zip_map(c.grad, c.inputs[1], |g, y| g * y);
            let gb = zip_map(c.grad, c.inputs[0], |g, x| g * x);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |c| vec![Some(c.grad.map(|g| g * s))])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::gelu);
        self.push(out, &[a], |c| {
            vec![Some(zip_map(c.grad, c.inputs[0], |g, x| g * tensor::gelu_grad(x)))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, &[a], |c| {
            vec![Some(zip_map(c.grad, c.output, |g, s| g * s * (1.0 - s)))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.push(out, &[a], move |c| {
            vec![Some(Tensor::from_parts(&src_shape, c.grad.data().to_vec()))]
        })
    }

    /// Adds a `[cols]` row vector to every row of `[rows, cols]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        let cols = *va.shape().last().unwrap();
        assert_eq!(vr.len(), cols, "add_row: width mismatch");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, r) in chunk.iter_mut().zip(vr.data()) {
                *x += r;
            }
        }
        let out = Tensor::from_parts(va.shape(), data);
        let row_shape = vr.shape().to_vec();
        self.push(out, &[a, row], move |c| {
            let mut gr = vec![0.0; cols];
            for chunk in c.grad.data().chunks(cols) {
                for (acc, g) in gr.iter_mut().zip(chunk) {
                    *acc += g;
                }
            }
            vec![Some(c.grad.clone()), Some(Tensor::from_parts(&row_shape, gr))]
        })
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = if b_t { vb.shape()[0] } else { vb.shape()[1] };
        let kb = if b_t { vb.shape()[1] } else { vb.shape()[0] };
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), b_t, &mut out, false);
        let out = Tensor::from_parts(&[m, n], out);
        self.push(out, &[a, b], move |c| {
            let (va, vb, g) = (c.inputs[0], c.inputs[1], c.grad.data());
            let ga = c.needs[0].then(|| {
                // dA = G · Bᵀ (or G · B when b is already transposed)
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, vb.data(), !b_t, &mut ga, false);
                Tensor::from_parts(&[m, k], ga)
            });
            let gb = c.needs[1].then(|| {
                if b_t {
                    // dB[n, k] = Gᵀ · A
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, va.data(), false, &mut gb, false);
                    Tensor::from_parts(&[n, k], gb)
                } else {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g, false, &mut gb, false);
                    Tensor::from_parts(&[k, n], gb)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, &[a], |c| vec![Some(c.grad.transpose())])
    }

    /// `x [n, in] · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_row(y, b)
    }

    // ---------------------------------------------------------------------
    // Normalisation
    // ---------------------------------------------------------------------

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            tensor::softmax_in_place(row);
        }
        let out = Tensor::from_parts(va.shape(), data);
        self.push(out, &[a], move |c| {
            let mut g = c.grad.data().to_vec();
            for (grow, srow) in g.chunks_mut(cols).zip(c.output.data().chunks(cols)) {
                let dot: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
                for (gv, s) in grow.iter_mut().zip(srow) {
                    *gv = s * (*gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(c.grad.shape(), g))]
        })
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let rows = vx.len() / d;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::from_parts(vx.shape(), out);
        self.push(out, &[x, gamma, beta], move |c| {
            let g = c.grad.data();
            let gamma = c.inputs[1].data();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_gh = 0.0;
                let mut sum_ghx = 0.0;
                for j in 0..d {
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                    let gh = gr[j] * gamma[j];
                    sum_gh += gh;
                    sum_ghx += gh * hr[j];
                }
                let dn = d as f64;
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    gx[r * d + j] = inv_std[r] * (gh - sum_gh / dn - hr[j] * sum_ghx / dn);
                }
            }
            vec![
                Some(Tensor::from_parts(c.inputs[0].shape(), gx)),
                Some(Tensor::from_parts(c.inputs[1].shape(), gg)),
                Some(Tensor::from_parts(c.inputs[2].shape(), gb)),
            ]
        })
    }

    // ---------------------------------------------------------------------
    // Slicing and concatenation
    // ---------------------------------------------------------------------

    /// Concatenates along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape()[1..], first[1..], "concat0: trailing shape mismatch");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            sizes.push((v.shape().to_vec(), v.len()));
        }
        let mut shape = first;
        shape[0] = lead;
        let out = Tensor::from_parts(&shape, data);
        self.push(out, parts, move |c| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|(shape, len)| {
                    let g = c.grad.data()[offset..offset + len].to_vec();
                    offset += len;
                    Some(Tensor::from_parts(shape, g))
                })
                .collect()
        })
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        assert!(start < end && end <= rows, "slice_rows out of range");
        let out = Tensor::from_parts(&[end - start, cols], va.data()[start * cols..end * cols].to_vec());
        self.push(out, &[a], move |c| {
            let mut g = vec![0.0; rows * cols];
            g[start * cols..end * cols].copy_from_slice(c.grad.data());
            vec![Some(Tensor::from_parts(&[rows, cols], g))]
        })
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        assert!(start < end && end <= cols, "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::from_parts(&[rows, w], data);
        self.push(out, &[a], move |c| {
            let mut g = vec![0.0; rows * cols];
            for r in 0..rows {
                g[r * cols + start..r * cols + end].copy_from_slice(&c.grad.data()[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::from_parts(&[rows, cols], g))]
        })
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s[0], rows, "concat_cols: row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::from_parts(&[rows, total], data);
        self.push(out, parts, move |c| {
            let mut offset = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&c.grad.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    Some(Tensor::from_parts(&[rows, w], g))
                })
                .collect()
        })
    }

    // ---------------------------------------------------------------------
    // Spatial ops on [C, H, W]
    // ---------------------------------------------------------------------

    /// Valid (unpadded) convolution: `x [cin, h, w]`, `w [cout, cin, k, k]`, `b [cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(weight);
        let (cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, wcin, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(h >= k && w >= k, "conv2d: input smaller than kernel");
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let pointwise = k == 1 && stride == 1;
        let cols = if pointwise {
            None
        } else {
            Some(im2col(vx.data(), cin, (h, w), k, stride, (oh, ow)))
        };
        let ck = cin * k * k;
        let npix = oh * ow;
        let mut out = vec![0.0; cout * npix];
        gemm(
            cout,
            ck,
            npix,
            vw.data(),
            false,
            cols.as_deref().unwrap_or(vx.data()),
            false,
            &mut out,
            false,
        );
        let vb = self.value(bias).data();
        for (co, plane) in out.chunks_mut(npix).enumerate() {
            let bv = vb[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::from_parts(&[cout, oh, ow], out);
        self.push(out, &[x, weight, bias], move |c| {
            let g = c.grad.data();
            let cols_ref: &[f64] = cols.as_deref().unwrap_or(c.inputs[0].data());
            let gx = c.needs[0].then(|| {
                let mut gcols = vec![0.0; ck * npix];
                gemm(ck, cout, npix, c.inputs[1].data(), true, g, false, &mut gcols, false);
                let gx = if pointwise {
                    gcols
                } else {
                    col2im(&gcols, cin, (h, w), k, stride, (oh, ow))
                };
                Tensor::from_parts(&[cin, h, w], gx)
            });
            let gw = c.needs[1].then(|| {
                let mut gw = vec![0.0; cout * ck];
                gemm(cout, npix, ck, g, false, cols_ref, true, &mut gw, false);
                Tensor::from_parts(&[cout, cin, k, k], gw)
            });
            let gb = c.needs[2].then(|| {
                let sums = g.chunks(npix).map(|p| p.iter().sum()).collect();
                Tensor::from_parts(&[cout], sums)
            });
            vec![gx, gw, gb]
        })
    }

    /// Transposed convolution with kernel 2 and stride 2:
    /// `x [cin, h, w]`, `w [cin, cout, 2, 2]`, `b [cout]` → `[cout, 2h, 2w]`.
    pub fn conv_transpose2x2(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(weight);
        let (cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (wcin, cout) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(cin, wcin, "conv_transpose2x2: channel mismatch");
        let npix = h * w;
        // tmp[(co, dy, dx), p] = Σ_ci w[ci, (co, dy, dx)] · x[ci, p]
        let mut tmp = vec![0.0; cout * 4 * npix];
        gemm(cout * 4, cin, npix, vw.data(), true, vx.data(), false, &mut tmp, false);
        let (oh, ow) = (2 * h, 2 * w);
        let vb = self.value(bias).data();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = &tmp[((co * 2 + dy) * 2 + dx) * npix..][..npix];
                    for y in 0..h {
                        for xx in 0..w {
                            out[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] = src[y * w + xx] + vb[co];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(&[cout, oh, ow], out);
        self.push(out, &[x, weight, bias], move |c| {
            let g = c.grad.data();
            let mut gtmp = vec![0.0; cout * 4 * npix];
            for co in 0..cout {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = &mut gtmp[((co * 2 + dy) * 2 + dx) * npix..][..npix];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = g[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx];
                            }
                        }
                    }
                }
            }
            let gx = c.needs[0].then(|| {
                let mut gx = vec![0.0; cin * npix];
                gemm(cin, cout * 4, npix, c.inputs[1].data(), false, &gtmp, false, &mut gx, false);
                Tensor::from_parts(&[cin, h, w], gx)
            });
            let gw = c.needs[1].then(|| {
                let mut gw = vec![0.0; cin * cout * 4];
                gemm(cin, npix, cout * 4, c.inputs[0].data(), false, &gtmp, true, &mut gw, false);
                Tensor::from_parts(&[cin, cout, 2, 2], gw)
            });
            let gb = c.needs[2].then(|| {
                let sums = g.chunks(oh * ow).map(|p| p.iter().sum()).collect();
                Tensor::from_parts(&[cout], sums)
            });
            vec![gx, gw, gb]
        })
    }

    /// Bilinear resize of `[c, h, w]` to `[c, oh, ow]` (pixel-center, clamped).
    pub fn resize_bilinear(&mut self, x: Var, size: (usize, usize)) -> Var {
        let vx = self.value(x);
        let (ch, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let data = tensor::resize_bilinear(vx.data(), ch, (h, w), size);
        let out = Tensor::from_parts(&[ch, size.0, size.1], data);
        self.push(out, &[x], move |c| {
            let g = tensor::resize_bilinear_backward(c.grad.data(), ch, (h, w), size);
            vec![Some(Tensor::from_parts(&[ch, h, w], g))]
        })
    }

    // ---------------------------------------------------------------------
    // Reductions and losses
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |c| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy with logits against a fixed `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), target.len(), "bce: size mismatch");
        let n = vl.len() as f64;
        let total: f64 = vl
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| bce_logit_term(x, t))
            .sum();
        let target = target.clone();
        self.push(Tensor::scalar(total / n), &[logits], move |c| {
            let scale = c.grad.item() / n;
            let g = zip_map(c.inputs[0], &target, |x, t| (tensor::sigmoid(x) - t) * scale);
            vec![Some(g)]
        })
    }

    /// `1 − (2·Σ σ(x)·t + s) / (Σ σ(x) + Σ t + s)` against a fixed `target`.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), target.len(), "dice: size mismatch");
        let probs: Vec<f64> = vl.data().iter().map(|&x| tensor::sigmoid(x)).collect();
        let inter: f64 = probs.iter().zip(target.data()).map(|(p, t)| p * t).sum();
        let psum: f64 = probs.iter().sum();
        let tsum: f64 = target.sum();
        let num = 2.0 * inter + smooth;
        let den = psum + tsum + smooth;
        let target = target.clone();
        self.push(Tensor::scalar(1.0 - num / den), &[logits], move |c| {
            let go = c.grad.item();
            let data = probs
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let dl_dp = -(2.0 * t * den - num) / (den * den);
                    go * dl_dp * p * (1.0 - p)
                })
                .collect();
            vec![Some(Tensor::from_parts(c.inputs[0].shape(), data))]
        })
    }
}

/// Numerically stable `-(t·ln σ(x) + (1−t)·ln(1−σ(x)))`.
pub(crate) fn bce_logit_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

fn im2col(
    x: &[f64],
    cin: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let npix = oh * ow;
    let mut cols = vec![0.0; cin * k * k * npix];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let src = &x[ci * h * w + (oy * stride + ky) * w..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[ox * stride + kx];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    cin: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let npix = oh * ow;
    let mut x = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let base = ci * h * w + (oy * stride + ky) * w;
                    for ox in 0..ow {
                        x[base + ox * stride + kx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}
