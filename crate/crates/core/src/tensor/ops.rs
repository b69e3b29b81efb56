use crate::error::{NtaaError, Result};

use super::element::matmul_into;
use super::{Element, Graph, Tensor, Var};

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(NtaaError::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(NtaaError::shape(format!("{what} expects rank {rank}, got {shape:?}")));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape(), "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|c| {
                vec![c.needs[0].then(|| c.grad.to_vec()), c.needs[1].then(|| c.grad.to_vec())]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape(), "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape(), "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(y).map(|(&g, &v)| g * v).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(x).map(|(&g, &v)| g * v).collect()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?;
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |c| vec![Some(c.grad.iter().map(|&g| g * s).collect())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x.max(T::zero())).collect())?;
        self.push(
            "relu",
            out,
            &[a],
            Box::new(|c| {
                let y = c.output.data();
                vec![Some(
                    c.grad
                        .iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, &[a], Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(
            "sum",
            Tensor::scalar(s),
            &[a],
            Box::new(|c| vec![Some(vec![c.grad[0]; c.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(NtaaError::arg("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum of squares over several tensors (the `||W||²` term).
    pub fn l2_sq(&mut self, vars: &[Var]) -> Result<Var> {
        let s = vars
            .iter()
            .map(|&v| self.value(v).data().iter().map(|&x| x * x).sum::<T>())
            .fold(T::zero(), |a, b| a + b);
        self.push(
            "l2_sq",
            Tensor::scalar(s),
            vars,
            Box::new(|c| {
                let g = c.grad[0] * T::c(2.0);
                c.inputs
                    .iter()
                    .zip(&c.needs)
                    .map(|(t, &need)| need.then(|| t.data().iter().map(|&x| g * x).collect()))
                    .collect()
            }),
        )
    }

    /// `Σ coeffs[i] * v[i]` as a scalar.
    pub fn dot_const(&mut self, v: Var, coeffs: Vec<T>) -> Result<Var> {
        let t = self.value(v);
        if t.numel() != coeffs.len() {
            return Err(NtaaError::shape(format!(
                "dot_const: {} coeffs for {:?}",
                coeffs.len(),
                t.shape()
            )));
        }
        let s = t.data().iter().zip(&coeffs).map(|(&a, &b)| a * b).sum::<T>();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            &[v],
            Box::new(move |c| vec![Some(coeffs.iter().map(|&k| k * c.grad[0]).collect())]),
        )
    }

    /// Convex-style mixture `Σ_i w[i] * inputs[i]` with learnable weights `w` of shape `[len(inputs)]`.
    pub fn mix(&mut self, inputs: &[Var], w: Var) -> Result<Var> {
        if inputs.is_empty() {
            return Err(NtaaError::arg("mix of zero inputs"));
        }
        let tw = self.value(w);
        if tw.numel() != inputs.len() {
            return Err(NtaaError::shape(format!(
                "mix: {} weights for {} inputs",
                tw.numel(),
                inputs.len()
            )));
        }
        let weights = tw.data().to_vec();
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(inputs[0]).numel()];
        for (&v, &wi) in inputs.iter().zip(&weights) {
            let t = self.value(v);
            same_shape(&shape, t.shape(), "mix")?;
            acc.iter_mut().zip(t.data()).for_each(|(a, &x)| *a = *a + wi * x);
        }
        let mut all = inputs.to_vec();
        all.push(w);
        let n = inputs.len();
        self.push(
            "mix",
            Tensor::new(&shape, acc)?,
            &all,
            Box::new(move |c| {
                let w = c.inputs[n].data();
                let mut out: Vec<Option<Vec<T>>> = (0..n)
                    .map(|i| c.needs[i].then(|| c.grad.iter().map(|&g| g * w[i]).collect()))
                    .collect();
                out.push(c.needs[n].then(|| {
                    (0..n)
                        .map(|i| {
                            c.inputs[i].data().iter().zip(c.grad).map(|(&x, &g)| x * g).sum::<T>()
                        })
                        .collect()
                }));
                out
            }),
        )
    }

    /// `a[M,K] @ b[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank(&sa, 2, "matmul lhs")?;
        expect_rank(&sb, 2, "matmul rhs")?;
        if sa[1] != sb[0] {
            return Err(NtaaError::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            m,
            k,
            n,
            false,
        );
        self.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            &[a, b],
            Box::new(move |c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let ga = c.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    matmul_into(c.grad, false, y, true, &mut g, m, n, k, false);
                    g
                });
                let gb = c.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    matmul_into(x, true, c.grad, false, &mut g, k, m, n, false);
                    g
                });
                vec![ga, gb]
            }),
        )
    }

    /// `a[M,K] @ b[N,K]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank(&sa, 2, "matmul_nt lhs")?;
        expect_rank(&sb, 2, "matmul_nt rhs")?;
        if sa[1] != sb[1] {
            return Err(NtaaError::shape(format!("matmul_nt: {sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            m,
            k,
            n,
            false,
        );
        self.push(
            "matmul_nt",
            Tensor::new(&[m, n], out)?,
            &[a, b],
            Box::new(move |c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let ga = c.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    matmul_into(c.grad, false, y, false, &mut g, m, n, k, false);
                    g
                });
                let gb = c.needs[1].then(|| {
                    let mut g = vec![T::zero(); n * k];
                    matmul_into(c.grad, true, x, false, &mut g, n, m, k, false);
                    g
                });
                vec![ga, gb]
            }),
        )
    }

    /// Fully connected layer: `x[N,I] @ w[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Adds `b[C]` to every row of `x[N,C]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        expect_rank(&sx, 2, "add_row_bias")?;
        if sb != [sx[1]] {
            return Err(NtaaError::shape(format!("bias {sb:?} for rows of {sx:?}")));
        }
        let cols = sx[1];
        let bias = self.value(b).data().to_vec();
        let data =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v + bias[i % cols]).collect();
        self.push(
            "add_row_bias",
            Tensor::new(&sx, data)?,
            &[x, b],
            Box::new(move |c| {
                let gb = c.needs[1].then(|| {
                    let mut g = vec![T::zero(); cols];
                    for row in c.grad.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    g
                });
                vec![c.needs[0].then(|| c.grad.to_vec()), gb]
            }),
        )
    }

    /// Row-wise inner products of `a[N,D]` and `b[N,D]`, shaped `[N,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        expect_rank(&sa, 2, "row_dot")?;
        same_shape(&sa, self.shape(b), "row_dot")?;
        let d = sa[1];
        let data = self
            .value(a)
            .data()
            .chunks(d.max(1))
            .zip(self.value(b).data().chunks(d.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>())
            .collect();
        self.push(
            "row_dot",
            Tensor::new(&[sa[0], 1], data)?,
            &[a, b],
            Box::new(move |c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let scaled = |other: &[T]| -> Vec<T> {
                    other.iter().enumerate().map(|(i, &v)| v * c.grad[i / d]).collect()
                };
                vec![c.needs[0].then(|| scaled(y)), c.needs[1].then(|| scaled(x))]
            }),
        )
    }

    /// Horizontal concatenation of `a[N,P]` and `b[N,Q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank(&sa, 2, "concat_cols")?;
        expect_rank(&sb, 2, "concat_cols")?;
        if sa[0] != sb[0] {
            return Err(NtaaError::shape(format!("concat_cols: {sa:?} and {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        let (x, y) = (self.value(a).data(), self.value(b).data());
        for r in 0..n {
            data.extend_from_slice(&x[r * p..(r + 1) * p]);
            data.extend_from_slice(&y[r * q..(r + 1) * q]);
        }
        self.push(
            "concat_cols",
            Tensor::new(&[n, p + q], data)?,
            &[a, b],
            Box::new(move |c| {
                let rows = c.grad.chunks(p + q);
                let ga = c.needs[0].then(|| rows.clone().flat_map(|r| r[..p].to_vec()).collect());
                let gb = c.needs[1].then(|| rows.flat_map(|r| r[p..].to_vec()).collect());
                vec![ga, gb]
            }),
        )
    }

    /// Scales each row of `x[N,D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        expect_rank(&sx, 2, "l2_normalize_rows")?;
        let d = sx[1].max(1);
        let eps = T::c(1e-12);
        let norms: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let data =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v / norms[i / d]).collect();
        self.push(
            "l2_normalize_rows",
            Tensor::new(&sx, data)?,
            &[x],
            Box::new(move |c| {
                let y = c.output.data();
                let mut g = vec![T::zero(); y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &c.grad[r * d..(r + 1) * d];
                    let proj = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - yr[j] * proj) / *norm;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let last = *t.shape().last().ok_or_else(|| NtaaError::shape("softmax of a scalar"))?;
        if last == 0 {
            return Err(NtaaError::arg("softmax over an empty axis"));
        }
        let data: Vec<T> = t.data().chunks(last).flat_map(softmax_row).collect();
        let out = Tensor::new(t.shape(), data)?;
        self.push(
            "softmax",
            out,
            &[v],
            Box::new(move |c| {
                let y = c.output.data();
                let mut g = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in
                    g.chunks_mut(last).zip(y.chunks(last)).zip(c.grad.chunks(last))
                {
                    let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..last {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`; `logits` is `[N,C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        expect_rank(&s, 2, "cross_entropy")?;
        let (n, classes) = (s[0], s[1]);
        if n == 0 {
            return Err(NtaaError::arg("cross_entropy over an empty batch"));
        }
        if labels.len() != n {
            return Err(NtaaError::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NtaaError::arg(format!("label {bad} out of range for {classes} classes")));
        }
        let probs: Vec<T> =
            self.value(logits).data().chunks(classes).flat_map(softmax_row).collect();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                -log_softmax_at(&self.value(logits).data()[r * classes..(r + 1) * classes], l)
            })
            .sum::<T>()
            / T::c(n as f64);
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |c| {
                let scale = c.grad[0] / T::c(n as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * classes + l] = g[r * classes + l] - scale;
                }
                vec![Some(g)]
            }),
        )
    }
}

pub(crate) fn softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().copied().sum::<T>();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at<T: Element>(row: &[T], idx: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    row[idx] - lse
}
