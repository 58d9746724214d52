//! Elementwise and linear-algebra ops with their backward rules.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Row-major matrix product, parallel over output rows. Each output row is
/// reduced sequentially, so results are bit-identical regardless of thread
/// count.
pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

pub(crate) fn transpose_raw<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn check_same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for (x, &u) in ga.iter_mut().zip(g) {
                        *x = *x + u;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (x, &u) in gb.iter_mut().zip(g) {
                        *x = *x + u;
                    }
                });
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for (x, &u) in ga.iter_mut().zip(g) {
                        *x = *x + u;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (x, &u) in gb.iter_mut().zip(g) {
                        *x = *x - u;
                    }
                });
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (av, bv) = (pa.to_vec(), pb.to_vec());
                pa.accumulate_grad(|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                pb.accumulate_grad(|gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }),
        ))
    }

    pub fn scalar_mul(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a * c).collect();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for (x, &u) in ga.iter_mut().zip(g) {
                        *x = *x + u * c;
                    }
                });
            }),
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scalar_mul(-E::one())
    }

    pub fn relu(&self) -> Tensor<E> {
        let input = self.to_vec();
        let data = input
            .iter()
            .map(|&a| if a > E::zero() { a } else { E::zero() })
            .collect();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for i in 0..ga.len() {
                        if input[i] > E::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a.exp()).collect();
        let out = data.clone();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * out[i];
                    }
                });
            }),
        )
    }

    /// Reduce every element to a scalar.
    pub fn sum(&self) -> Tensor<E> {
        let total = self.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let pa = self.clone();
        Tensor::new_node(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| {
                let u = g[0];
                pa.accumulate_grad(|ga| {
                    for x in ga.iter_mut() {
                        *x = *x + u;
                    }
                });
            }),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let inv = E::one() / E::from_f64_lossy(self.numel() as f64);
        self.sum().scalar_mul(inv)
    }

    /// Squared Frobenius norm as a scalar graph node.
    pub fn frobenius_sq(&self) -> Tensor<E> {
        let total = self
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v * v);
        let pa = self.clone();
        Tensor::new_node(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| {
                let u = g[0];
                let two = E::one() + E::one();
                let vals = pa.to_vec();
                pa.accumulate_grad(|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + u * two * vals[i];
                    }
                });
            }),
        )
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected 2-d operands, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} vs {:?}", sa, sb),
            ));
        }
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    let bt = transpose_raw(&pb.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    pa.accumulate_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + da[i];
                        }
                    });
                }
                if pb.requires_grad() {
                    let at = transpose_raw(&pa.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    pb.accumulate_grad(|gb| {
                        for i in 0..gb.len() {
                            gb[i] = gb[i] + db[i];
                        }
                    });
                }
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(
                "transpose2d",
                format!("expected 2-d tensor, got {:?}", s),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_raw(&self.data(), rows, cols);
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![cols, rows],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gt = transpose_raw(g, cols, rows);
                pa.accumulate_grad(|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gt[i];
                    }
                });
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for (x, &u) in ga.iter_mut().zip(g) {
                        *x = *x + u;
                    }
                });
            }),
        ))
    }

    /// Row-wise softmax on an `[N, M]` matrix, stabilized by row-max
    /// subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(
                "softmax_rows",
                format!("expected 2-d logits, got {:?}", s),
            ));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        let input = self.to_vec();
        let mut data = vec![E::zero(); rows * cols];
        for i in 0..rows {
            let row = &input[i * cols..(i + 1) * cols];
            let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
            let mut denom = E::zero();
            for j in 0..cols {
                let e = (row[j] - mx).exp();
                data[i * cols + j] = e;
                denom = denom + e;
            }
            for j in 0..cols {
                data[i * cols + j] = data[i * cols + j] / denom;
            }
        }
        let out = data.clone();
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![rows, cols],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for i in 0..rows {
                        let y = &out[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot = y
                            .iter()
                            .zip(gr)
                            .fold(E::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..cols {
                            ga[i * cols + j] = ga[i * cols + j] + y[j] * (gr[j] - dot);
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::dim("concat_channels", "empty input list"));
        }
        let first = parts[0].shape();
        if first.len() != 4 {
            return Err(Error::dim(
                "concat_channels",
                format!("expected 4-d tensors, got {:?}", first),
            ));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::dim(
                    "concat_channels",
                    format!("incompatible shapes {:?} and {:?}", first, s),
                ));
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = vec![E::zero(); n * c_total * plane];
        for b in 0..n {
            let mut c_off = 0;
            for (p, &c) in parts.iter().zip(&channels) {
                let src = p.data();
                let src = &src[b * c * plane..(b + 1) * c * plane];
                let dst = &mut data[(b * c_total + c_off) * plane..(b * c_total + c_off + c) * plane];
                dst.copy_from_slice(src);
                c_off += c;
            }
        }
        let parents: Vec<Tensor<E>> = parts.to_vec();
        let captured = parents.clone();
        let chans = channels;
        Ok(Tensor::new_node(
            vec![n, c_total, h, w],
            data,
            parents,
            Box::new(move |g| {
                for b in 0..n {
                    let mut c_off = 0;
                    for (p, &c) in captured.iter().zip(&chans) {
                        let base = (b * c_total + c_off) * plane;
                        p.accumulate_grad(|gp| {
                            let dst = &mut gp[b * c * plane..(b + 1) * c * plane];
                            for (x, &u) in dst.iter_mut().zip(&g[base..base + c * plane]) {
                                *x = *x + u;
                            }
                        });
                        c_off += c;
                    }
                }
            }),
        ))
    }
}
