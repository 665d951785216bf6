use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Output of [`Graph::attention`]: context vectors plus the weights used.
pub struct AttentionOutput<F> {
    pub context: Var,
    /// `[heads, queries, keys]`, row-stochastic over unmasked keys.
    pub weights: Tensor<F>,
}

impl<'s, F: Real> Graph<'s, F> {
    /// `y = x W^T + b` over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("x {:?} vs W {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (rows, inp, out) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let mut y = vec![F::zero(); rows * out];
        gemm(xv.mat(), wv.mat().t(), &mut y, out, false);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {out} outputs", bv.shape()),
                ));
            }
            for r in 0..rows {
                add_into(&mut y[r * out..(r + 1) * out], bv.data());
            }
            parents.push(b);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar input") = out;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, &parents, move |g, vals, sink| {
            let gm = MatRef::new(g.data(), rows, out);
            if sink.wants(x) {
                let wv = vals.get(w);
                let dx = sink.slot(x, vals.get(x).shape()).expect("wanted");
                gemm(gm, wv.mat(), dx, inp, true);
            }
            if let Some(dw) = sink.slot(w, &[out, inp]) {
                gemm(gm.t(), vals.get(x).mat(), dw, inp, true);
            }
            if let Some(b) = b {
                if let Some(db) = sink.slot(b, vals.get(b).shape()) {
                    for r in 0..rows {
                        add_into(db, &g.data()[r * out..(r + 1) * out]);
                    }
                }
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let shape = out.shape().to_vec();
        Ok(self.push(out, &[a, b], move |g, _, sink| {
            if let Some(da) = sink.slot(a, &shape) {
                add_into(da, g.data());
            }
            if let Some(db) = sink.slot(b, &shape) {
                add_into(db, g.data());
            }
        }))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let shape = out.shape().to_vec();
        self.push(out, &[x], move |g, _, sink| {
            if let Some(dx) = sink.slot(x, &shape) {
                for (d, &gi) in dx.iter_mut().zip(g.data()) {
                    *d = *d + gi * s;
                }
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let shape = out.shape().to_vec();
        self.push(out, &[x], move |g, vals, sink| {
            let xv = vals.get(x);
            if let Some(dx) = sink.slot(x, &shape) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g.data()).zip(xv.data()) {
                    if xi > F::zero() {
                        *d = *d + gi;
                    }
                }
            }
        })
    }

    /// Normalises each row to zero mean and unit variance, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c < 1 {
            return Err(Error::shape("layer_norm", "last dimension is empty"));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias {:?}/{:?} vs width {c}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let eps = F::of(eps);
        let cf = F::of(c as f64);
        let mut xhat = vec![F::zero(); rows * c];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let shape = value.shape().to_vec();
        Ok(self.push(value, &[x, gain, bias], move |g, vals, sink| {
            let gd = g.data();
            if let Some(dg) = sink.slot(gain, &[c]) {
                for r in 0..rows {
                    for j in 0..c {
                        dg[j] = dg[j] + gd[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(db) = sink.slot(bias, &[c]) {
                for r in 0..rows {
                    add_into(db, &gd[r * c..(r + 1) * c]);
                }
            }
            let gain_v = vals.get(gain).data();
            if let Some(dx) = sink.slot(x, &shape) {
                let mut dxhat = vec![F::zero(); c];
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = gd[r * c + j] * gain_v[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<F>() / cf;
                    let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / cf;
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * c..(r + 1) * c]);
        }
        let y = out.clone();
        self.push(out, &[x], move |g, _, sink| {
            if let Some(dx) = sink.slot(x, y.shape()) {
                for r in 0..rows {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        })
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let y = out.clone();
        self.push(out, &[x], move |g, _, sink| {
            if let Some(dx) = sink.slot(x, y.shape()) {
                for r in 0..rows {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
        })
    }

    /// Scaled dot-product attention over `heads` column blocks.
    ///
    /// `q` is `[Lq, d]`, `k`/`v` are `[Lk, d]`. Keys flagged `true` in
    /// `key_padding` get weight exactly zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_padding: Option<&[bool]>,
    ) -> Result<AttentionOutput<F>> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (lq, lk) = (qv.rows(), kv.rows());
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if kv.cols() != d || vv.cols() != d || vv.rows() != lk {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let mask: Vec<bool> = match key_padding {
            Some(m) if m.len() != lk => {
                return Err(Error::shape(
                    "attention",
                    format!("mask length {} vs {lk} keys", m.len()),
                ))
            }
            Some(m) => m.to_vec(),
            None => vec![false; lk],
        };
        if lk == 0 || mask.iter().all(|&m| m) {
            return Err(Error::InvalidArgument(
                "attention needs at least one unpadded key".into(),
            ));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut weights = vec![F::zero(); heads * lq * lk];
        let mut ctx = vec![F::zero(); lq * d];
        for h in 0..heads {
            let a = &mut weights[h * lq * lk..(h + 1) * lq * lk];
            gemm(
                MatRef::cols_of(qv.data(), lq, d, h * dh, dh),
                MatRef::cols_of(kv.data(), lk, d, h * dh, dh).t(),
                a,
                lk,
                false,
            );
            for r in 0..lq {
                let row = &mut a[r * lk..(r + 1) * lk];
                masked_softmax(row, &mask, scale);
            }
            gemm(
                MatRef::new(a, lq, lk),
                MatRef::cols_of(vv.data(), lk, d, h * dh, dh),
                &mut ctx[h * dh..],
                d,
                false,
            );
        }
        let weights = Tensor::new(&[heads, lq, lk], weights)?;
        let saved = weights.clone();
        let context = self.push(Tensor::new(&[lq, d], ctx)?, &[q, k, v], move |g, vals, sink| {
            let (qv, kv, vv) = (vals.get(q), vals.get(k), vals.get(v));
            let gd = g.data();
            let aw = saved.data();
            // dS per head, already multiplied by the score scale.
            let mut ds = vec![F::zero(); heads * lq * lk];
            for h in 0..heads {
                let da = &mut ds[h * lq * lk..(h + 1) * lq * lk];
                gemm(
                    MatRef::cols_of(gd, lq, d, h * dh, dh),
                    MatRef::cols_of(vv.data(), lk, d, h * dh, dh).t(),
                    da,
                    lk,
                    false,
                );
                let a = &aw[h * lq * lk..(h + 1) * lq * lk];
                for r in 0..lq {
                    let (ar, dr) = (&a[r * lk..(r + 1) * lk], &mut da[r * lk..(r + 1) * lk]);
                    let dot: F = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                    for j in 0..lk {
                        dr[j] = ar[j] * (dr[j] - dot) * scale;
                    }
                }
            }
            if let Some(dq) = sink.slot(q, &[lq, d]) {
                for h in 0..heads {
                    gemm(
                        MatRef::new(&ds[h * lq * lk..], lq, lk),
                        MatRef::cols_of(kv.data(), lk, d, h * dh, dh),
                        &mut dq[h * dh..],
                        d,
                        true,
                    );
                }
            }
            if let Some(dk) = sink.slot(k, &[lk, d]) {
                for h in 0..heads {
                    gemm(
                        MatRef::new(&ds[h * lq * lk..], lq, lk).t(),
                        MatRef::cols_of(qv.data(), lq, d, h * dh, dh),
                        &mut dk[h * dh..],
                        d,
                        true,
                    );
                }
            }
            if let Some(dv) = sink.slot(v, &[lk, d]) {
                for h in 0..heads {
                    gemm(
                        MatRef::new(&aw[h * lq * lk..], lq, lk).t(),
                        MatRef::cols_of(gd, lq, d, h * dh, dh),
                        &mut dv[h * dh..],
                        d,
                        true,
                    );
                }
            }
        });
        Ok(AttentionOutput { context, weights })
    }

    /// Inverted dropout. Identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = {
            let rng = self.rng();
            (0..n)
                .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
                .collect()
        };
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        let shape = out.shape().to_vec();
        Ok(self.push(out, &[x], move |g, _, sink| {
            if let Some(dx) = sink.slot(x, &shape) {
                for ((d, &gi), &m) in dx.iter_mut().zip(g.data()).zip(&mask) {
                    *d = *d + gi * m;
                }
            }
        }))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for table of {vocab} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let ids = ids.to_vec();
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, &[table], move |g, _, sink| {
            if let Some(dt) = sink.slot(table, &[vocab, d]) {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &g.data()[r * d..(r + 1) * d]);
                }
            }
        }))
    }

    /// 3x3 convolution, stride 2, zero padding 1, on a `[C_in, H, W]` input.
    /// Output is `[C_out, ceil(H/2), ceil(W/2)]`.
    pub fn conv2d_3x3_s2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} weight {ws:?}"),
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        if bv.len() != cout {
            return Err(Error::shape("conv2d", format!("bias {:?}", bv.shape())));
        }
        if h == 0 || wd == 0 {
            return Err(Error::shape("conv2d", "empty input"));
        }
        let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
        let (p, kk) = (oh * ow, cin * 9);
        let mut cols = vec![F::zero(); p * kk];
        let xd = xv.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                for ci in 0..cin {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            row[ci * 9 + ky * 3 + kx] =
                                xd[ci * h * wd + iy as usize * wd + ix as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![F::zero(); cout * p];
        gemm(
            MatRef::new(wv.data(), cout, kk),
            MatRef::new(&cols, p, kk).t(),
            &mut out,
            p,
            false,
        );
        for c in 0..cout {
            let bc = bv.data()[c];
            out[c * p..(c + 1) * p].iter_mut().for_each(|v| *v = *v + bc);
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(value, &[x, w, b], move |g, vals, sink| {
            let gm = MatRef::new(g.data(), cout, p);
            if let Some(dw) = sink.slot(w, &[cout, cin, 3, 3]) {
                gemm(gm, MatRef::new(&cols, p, kk), dw, kk, true);
            }
            if let Some(db) = sink.slot(b, &[cout]) {
                for c in 0..cout {
                    db[c] = db[c] + g.data()[c * p..(c + 1) * p].iter().copied().sum();
                }
            }
            if sink.wants(x) {
                let mut dcols = vec![F::zero(); p * kk];
                gemm(gm.t(), vals.get(w).mat_2d(cout, kk), &mut dcols, kk, false);
                let dx = sink.slot(x, &[cin, h, wd]).expect("wanted");
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = &dcols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let di = ci * h * wd + iy as usize * wd + ix as usize;
                                    dx[di] = dx[di] + row[ci * 9 + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }))
    }

    /// `[C, T, F]` feature maps to a `[T, C*F]` sequence (channel-major within a frame).
    pub fn maps_to_sequence(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 {
            return Err(Error::shape("maps_to_sequence", format!("{s:?}")));
        }
        let (c, t, f) = (s[0], s[1], s[2]);
        let xd = xv.data();
        let mut out = vec![F::zero(); t * c * f];
        for ci in 0..c {
            for ti in 0..t {
                out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f]
                    .copy_from_slice(&xd[ci * t * f + ti * f..ci * t * f + (ti + 1) * f]);
            }
        }
        let value = Tensor::new(&[t, c * f], out)?;
        Ok(self.push(value, &[x], move |g, _, sink| {
            if let Some(dx) = sink.slot(x, &[c, t, f]) {
                let gd = g.data();
                for ci in 0..c {
                    for ti in 0..t {
                        add_into(
                            &mut dx[ci * t * f + ti * f..ci * t * f + (ti + 1) * f],
                            &gd[ti * c * f + ci * f..ti * c * f + (ci + 1) * f],
                        );
                    }
                }
            }
        }))
    }

    /// Scalar node with a precomputed value and gradient with respect to `x`.
    ///
    /// Losses with closed-form gradients (CTC, label smoothing, BCE) are
    /// computed outside the graph and attached through this op.
    pub fn attach_loss(&mut self, x: Var, loss: F, grad: Tensor<F>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape(
                "attach_loss",
                format!("grad {:?} vs input {:?}", grad.shape(), self.shape(x)),
            ));
        }
        Ok(self.push(Tensor::scalar(loss), &[x], move |g, _, sink| {
            let s = g.data()[0];
            if let Some(dx) = sink.slot(x, grad.shape()) {
                for (d, &gi) in dx.iter_mut().zip(grad.data()) {
                    *d = *d + gi * s;
                }
            }
        }))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut total = F::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("{:?}", t.shape())));
            }
            total = total + w * t.data()[0];
        }
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), &parents, move |g, _, sink| {
            for &(v, w) in &terms {
                if let Some(d) = sink.slot(v, &[1]) {
                    d[0] = d[0] + g.data()[0] * w;
                }
            }
        }))
    }
}

impl<F: Real> Tensor<F> {
    fn mat_2d(&self, rows: usize, cols: usize) -> MatRef<'_, F> {
        MatRef::new(self.data(), rows, cols)
    }
}

pub fn log_sum_exp<F: Real>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

fn masked_softmax<F: Real>(row: &mut [F], mask: &[bool], scale: F) {
    let mut m = F::neg_infinity();
    for (v, &pad) in row.iter_mut().zip(mask) {
        *v = *v * scale;
        if !pad {
            m = m.max(*v);
        }
    }
    let mut s = F::zero();
    for (v, &pad) in row.iter_mut().zip(mask) {
        *v = if pad { F::zero() } else { (*v - m).exp() };
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}
