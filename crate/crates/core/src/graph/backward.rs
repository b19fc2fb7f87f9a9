//! Adjoints for every operator and the reverse sweep itself.

use std::rc::Rc;

use super::kernels;
use super::{Graph, Op, Tid};
use crate::error::GraphError;
use crate::params::Gradients;
use crate::tensor::{Scalar, Tensor};

fn accum<T: Scalar>(slots: &mut [Option<Tensor<T>>], id: Tid, g: Tensor<T>) {
    match &mut slots[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            let dst = existing.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d = *d + *s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Broadcast `g` (a tensor with `axis` removed) back along that axis.
fn repeat_axis<T: Scalar>(g: &Tensor<T>, axis: usize, dim: usize) -> Tensor<T> {
    let outer: usize = g.shape()[..axis].iter().product();
    let inner: usize = g.shape()[axis..].iter().product();
    let mut shape = g.shape().to_vec();
    shape.insert(axis, dim);
    let mut out = Vec::with_capacity(g.len() * dim);
    for o in 0..outer {
        let block = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..dim {
            out.extend_from_slice(block);
        }
    }
    Tensor::from_vec(&shape, out)
}

impl<T: Scalar> Graph<T> {
    /// Reverse sweep from `out` with an explicit output gradient. Parameter
    /// gradients accumulate into `grads`; per-node gradients stay readable
    /// through [`Graph::grad_of`].
    pub(crate) fn backward_seeded(
        &mut self,
        out: Tid,
        seed: Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<(), GraphError> {
        self.node_grads = (0..self.nodes.len()).map(|_| None).collect();
        accum(&mut self.node_grads, out, seed);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad || self.node_grads[i].is_none() {
                continue;
            }
            let g = self.node_grads[i].clone().expect("grad present");
            // (input node, gradient contribution) pairs produced by this node.
            let mut contrib: Vec<(Tid, Tensor<T>)> = Vec::new();

            // Checkpoint regions need &mut self to rebuild their sub-graph,
            // so copy their pieces out before dispatching.
            let checkpoint = match &self.nodes[i].op {
                Op::Checkpoint { inputs, region, dropout_base } => {
                    Some((inputs.clone(), Rc::clone(region), *dropout_base))
                }
                _ => None,
            };
            if let Some((inputs, region, dropout_base)) = checkpoint {
                self.backward_checkpoint(i, &inputs, region, dropout_base, &g, grads, &mut contrib)?;
                for (tid, gc) in contrib {
                    accum(&mut self.node_grads, tid, gc);
                }
                continue;
            }

            match &self.nodes[i].op {
                Op::Leaf { param, .. } => {
                    if let Some(pid) = param {
                        grads.accumulate(*pid, g.clone());
                    }
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        contrib.push((*a, kernels::matmul_t(&g, false, bv, true)?));
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = if bv.rank() == 2 {
                            let k = av.shape()[av.rank() - 1];
                            let n = bv.shape()[1];
                            let a2 = av.reshaped(&[av.len() / k, k])?;
                            let g2 = g.reshaped(&[g.len() / n, n])?;
                            kernels::matmul_t(&a2, true, &g2, false)?
                        } else {
                            kernels::matmul_t(av, true, &g, false)?
                        };
                        contrib.push((*b, db));
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        contrib.push((*a, kernels::sum_to_shape(&g, self.nodes[a.0].value.shape())));
                    }
                    if self.nodes[b.0].requires_grad {
                        contrib.push((*b, kernels::sum_to_shape(&g, self.nodes[b.0].value.shape())));
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        let gb = kernels::binary("mul_adj", &g, bv, |x, y| x * y)?;
                        contrib.push((*a, kernels::sum_to_shape(&gb, av.shape())));
                    }
                    if self.nodes[b.0].requires_grad {
                        let ga = kernels::binary("mul_adj", &g, av, |x, y| x * y)?;
                        contrib.push((*b, kernels::sum_to_shape(&ga, bv.shape())));
                    }
                }
                Op::Scale { a, c } => contrib.push((*a, g.map(|x| x * *c))),
                Op::Exp { a } => {
                    let y = &self.nodes[i].value;
                    let da = kernels::binary("exp_adj", &g, y, |gv, yv| gv * yv)?;
                    contrib.push((*a, da));
                }
                Op::Log { a } => {
                    let x = &self.nodes[a.0].value;
                    let da = kernels::binary("log_adj", &g, x, |gv, xv| gv / xv)?;
                    contrib.push((*a, da));
                }
                Op::Softplus { a } => {
                    let x = &self.nodes[a.0].value;
                    let da = kernels::binary("softplus_adj", &g, x, |gv, xv| gv * kernels::sigmoid(xv))?;
                    contrib.push((*a, da));
                }
                Op::Silu { a } => {
                    let x = &self.nodes[a.0].value;
                    let da = kernels::binary("silu_adj", &g, x, |gv, xv| {
                        let s = kernels::sigmoid(xv);
                        gv * (s * (T::one() + xv * (T::one() - s)))
                    })?;
                    contrib.push((*a, da));
                }
                Op::SoftmaxCausal { a } => {
                    let y = &self.nodes[i].value;
                    let p = y.shape()[y.rank() - 1];
                    let mut da = vec![T::zero(); y.len()];
                    for (mi, (yb, gb)) in y.data().chunks_exact(p * p).zip(g.data().chunks_exact(p * p)).enumerate()
                    {
                        let base = mi * p * p;
                        for r in 0..p {
                            let mut s = T::zero();
                            for j in 0..=r {
                                s = s + gb[r * p + j] * yb[r * p + j];
                            }
                            for j in 0..=r {
                                da[base + r * p + j] = yb[r * p + j] * (gb[r * p + j] - s);
                            }
                        }
                    }
                    contrib.push((*a, Tensor::from_vec(y.shape(), da)));
                }
                Op::RmsNorm { a, gain, eps } => {
                    let x = &self.nodes[a.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let d = x.shape()[x.rank() - 1];
                    let dn = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); x.len()];
                    let mut dg = vec![T::zero(); d];
                    for r in 0..x.len() / d {
                        let row = &x.data()[r * d..(r + 1) * d];
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / dn;
                        let inv = (ms + *eps).sqrt().recip();
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + grow[j] * gv.data()[j] * row[j];
                            dg[j] = dg[j] + grow[j] * row[j] * inv;
                        }
                        let scale = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * grow[j] * gv.data()[j] - row[j] * scale;
                        }
                    }
                    if self.nodes[a.0].requires_grad {
                        contrib.push((*a, Tensor::from_vec(x.shape(), dx)));
                    }
                    if self.nodes[gain.0].requires_grad {
                        contrib.push((*gain, Tensor::from_vec(&[d], dg)));
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        for j in 0..d {
                            dt[dst + j] = dt[dst + j] + g.data()[r * d + j];
                        }
                    }
                    contrib.push((*table, Tensor::from_vec(tv.shape(), dt)));
                }
                Op::Reshape { a } => {
                    contrib.push((*a, g.reshaped(self.nodes[a.0].value.shape())?));
                }
                Op::Permute { a, axes } => {
                    let mut inv = vec![0usize; axes.len()];
                    for (k, &ax) in axes.iter().enumerate() {
                        inv[ax] = k;
                    }
                    contrib.push((*a, kernels::permute(&g, &inv)?));
                }
                Op::Slice { a, axis, start } => {
                    let dim = self.nodes[a.0].value.shape()[*axis];
                    let len = self.nodes[i].value.shape()[*axis];
                    let da = kernels::pad_constant(&g, *axis, *start, dim - start - len, T::zero())?;
                    contrib.push((*a, da));
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for p in parts {
                        let dim = self.nodes[p.0].value.shape()[*axis];
                        if self.nodes[p.0].requires_grad {
                            contrib.push((*p, kernels::slice(&g, *axis, offset, dim)?));
                        }
                        offset += dim;
                    }
                }
                Op::PadConstant { a, axis, before, .. } => {
                    let dim = self.nodes[a.0].value.shape()[*axis];
                    contrib.push((*a, kernels::slice(&g, *axis, *before, dim)?));
                }
                Op::LinearScan { decay, input } => {
                    let dv = &self.nodes[decay.0].value;
                    let h = &self.nodes[i].value;
                    let k = dv.shape()[0];
                    let p = dv.shape()[1];
                    let c: usize = dv.shape()[2..].iter().product::<usize>().max(1);
                    let mut ddecay = vec![T::zero(); dv.len()];
                    let mut dinput = vec![T::zero(); dv.len()];
                    let (dd, hd, gd) = (dv.data(), h.data(), g.data());
                    for ki in 0..k {
                        let base = ki * p * c;
                        for ch in 0..c {
                            let mut acc = T::zero();
                            for t in (0..p).rev() {
                                let idx = base + t * c + ch;
                                acc = gd[idx] + if t + 1 < p { dd[idx + c] * acc } else { T::zero() };
                                dinput[idx] = acc;
                                if t > 0 {
                                    ddecay[idx] = acc * hd[idx - c];
                                }
                            }
                        }
                    }
                    if self.nodes[decay.0].requires_grad {
                        contrib.push((*decay, Tensor::from_vec(dv.shape(), ddecay)));
                    }
                    if self.nodes[input.0].requires_grad {
                        contrib.push((*input, Tensor::from_vec(dv.shape(), dinput)));
                    }
                }
                Op::Rotary { a } => {
                    contrib.push((*a, kernels::rotary(&g, -1.0)?));
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let lv = &self.nodes[logits.0].value;
                    let v = lv.shape()[1];
                    let count = mask.iter().filter(|&&m| m).count();
                    let gs = g.item().to_f64_() / count as f64;
                    let probs = kernels::softmax_rows_f64(lv);
                    let mut dl = vec![T::zero(); lv.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            dl[r * v + j] = T::from_f64((probs[r * v + j] - onehot) * gs);
                        }
                    }
                    contrib.push((*logits, Tensor::from_vec(lv.shape(), dl)));
                }
                Op::Sum { a } => {
                    let s = g.item();
                    contrib.push((*a, Tensor::full(self.nodes[a.0].value.shape(), s)));
                }
                Op::SumAxis { a, axis } => {
                    let dim = self.nodes[a.0].value.shape()[*axis];
                    contrib.push((*a, repeat_axis(&g, *axis, dim)));
                }
                Op::Dropout { a, prob, stream } => {
                    // The same stream regenerates the same mask.
                    contrib.push((*a, super::dropout_apply(&g, *prob, self.seed, *stream)));
                }
                Op::Checkpoint { .. } => unreachable!("handled above"),
            }

            for (tid, gc) in contrib {
                if self.nodes[tid.0].requires_grad {
                    accum(&mut self.node_grads, tid, gc);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_checkpoint(
        &mut self,
        node: usize,
        inputs: &[Tid],
        region: super::RegionFn<T>,
        dropout_base: u64,
        g: &Tensor<T>,
        grads: &mut Gradients<T>,
        contrib: &mut Vec<(Tid, Tensor<T>)>,
    ) -> Result<(), GraphError> {
        // Re-execute the region from its recorded inputs.
        let mut sub = self.sub_graph(dropout_base);
        let sub_inputs: Vec<Tid> = inputs
            .iter()
            .map(|&t| {
                let value = self.nodes[t.0].value.clone();
                if self.nodes[t.0].requires_grad {
                    sub.input(value)
                } else {
                    sub.leaf(value)
                }
            })
            .collect();
        let sub_out = region(&mut sub, &sub_inputs)?;
        // Purity audit: recomputation must reproduce the recorded output
        // bit for bit.
        if sub.value(sub_out) != &self.nodes[node].value {
            return Err(GraphError::ImpureRegion);
        }
        sub.backward_seeded(sub_out, g.clone(), grads)?;
        for (&main_tid, &sub_tid) in inputs.iter().zip(sub_inputs.iter()) {
            if self.nodes[main_tid.0].requires_grad {
                if let Some(gi) = sub.grad_of(sub_tid) {
                    contrib.push((main_tid, gi.clone()));
                }
            }
        }
        let released = sub.counted_total();
        drop(sub);
        self.counter.sub(released);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    type G = Graph<f32>;

    #[test]
    fn sum_of_squares_gradient() {
        let store = ParamStore::<f32>::new();
        let mut g = G::new(Rc::clone(&store));
        let x = g.input(Tensor::from_vec(&[3], vec![1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_of(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = ParamStore::<f32>::new();
        let mut g = G::new(store);
        let x = g.input(Tensor::from_vec(&[2], vec![1., 2.]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, GraphError::NonScalarLoss(_)));
    }

    #[test]
    fn unused_leaf_reads_zero_gradient() {
        let store = ParamStore::<f32>::new();
        let pid_used = store.borrow_mut().register("used", Tensor::from_vec(&[2], vec![1., 2.]));
        let pid_unused = store.borrow_mut().register("unused", Tensor::from_vec(&[3], vec![0.; 3]));
        let mut g = G::new(Rc::clone(&store));
        let p = g.param(pid_used);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(pid_used, &store.borrow()).data(), &[1., 1.]);
        assert_eq!(grads.of(pid_unused, &store.borrow()).data(), &[0., 0., 0.]);
    }
}
