//! Raw numeric kernels over flat row-major buffers. No graph bookkeeping here.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight * im2col(x[n]) + bias` for every sample in the batch.
pub fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; batch * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let cols_ref: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let os = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for co in 0..g.cout {
            let orow = &mut os[co * p..(co + 1) * p];
            if let Some(b) = bias {
                orow.fill(b[co]);
            }
            let wrow = &weight[co * k..(co + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let crow = &cols_ref[kk * p..(kk + 1) * p];
                for (o, &c) in orow.iter_mut().zip(crow) {
                    *o += wv * c;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut dx = need.0.then(|| vec![0.0; batch * in_len]);
    let mut dw = need.1.then(|| vec![0.0; g.cout * k]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for n in 0..batch {
        let ds = &dout[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(db) = db.as_mut() {
            for co in 0..g.cout {
                db[co] += ds[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[n * in_len..(n + 1) * in_len];
            let cols_ref: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            for co in 0..g.cout {
                let drow = &ds[co * p..(co + 1) * p];
                let wrow = &mut dw[co * k..(co + 1) * k];
                for (kk, acc) in wrow.iter_mut().enumerate() {
                    let crow = &cols_ref[kk * p..(kk + 1) * p];
                    *acc += drow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for co in 0..g.cout {
                let drow = &ds[co * p..(co + 1) * p];
                let wrow = &weight[co * k..(co + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let crow = &mut dcols[kk * p..(kk + 1) * p];
                    for (c, &d) in crow.iter_mut().zip(drow) {
                        *c += wv * d;
                    }
                }
            }
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                for (a, b) in dxs.iter_mut().zip(&dcols) {
                    *a += b;
                }
            } else {
                col2im_add(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling with stride 2 and ceil rounding; returns outputs and argmax offsets
/// into the input buffer. Ties resolve to the first element in row-major order.
pub fn maxpool2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + iy * w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
