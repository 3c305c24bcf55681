//! Numeric kernels shared by the forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a stride-1, same-padded 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    /// Spatial extent `[depth, height, width]`.
    pub space: [usize; 3],
    /// Kernel extent `[kd, kh, kw]`, each odd.
    pub kernel: [usize; 3],
}

impl ConvGeom {
    fn volume(&self) -> usize {
        self.space.iter().product()
    }

    /// Calls `f(in_offset, out_offset, len)` for every contiguous run of
    /// output cells that reads input cells shifted by kernel tap `(kz, ky, kx)`.
    #[inline]
    fn for_each_run(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.space;
        let shift = |k: usize, ext: usize, size: usize| -> Option<(isize, usize, usize)> {
            let off = k as isize - (ext / 2) as isize;
            let lo = (-off).max(0) as usize;
            let hi = (size as isize - off.max(0)).max(0) as usize;
            (lo < hi).then_some((off, lo, hi))
        };
        let Some((oz, z0, z1)) = shift(kz, self.kernel[0], d) else { return };
        let Some((oy, y0, y1)) = shift(ky, self.kernel[1], h) else { return };
        let Some((ox, x0, x1)) = shift(kx, self.kernel[2], w) else { return };
        for z in z0..z1 {
            let iz = (z as isize + oz) as usize;
            for y in y0..y1 {
                let iy = (y as isize + oy) as usize;
                let out = (z * h + y) * w + x0;
                let inp = (iz * h + iy) * w + (x0 as isize + ox) as usize;
                f(inp, out, x1 - x0);
            }
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let [kd, kh, kw] = self.kernel;
        (0..kd).flat_map(move |kz| {
            (0..kh).flat_map(move |ky| (0..kw).map(move |kx| (kz, ky, kx, (kz * kh + ky) * kw + kx)))
        })
    }

    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }
}

pub(crate) fn conv3d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let vol = g.volume();
    let ks = g.ksize();
    let mut out = vec![0.0; g.cout * vol];
    for co in 0..g.cout {
        let o = &mut out[co * vol..(co + 1) * vol];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * vol..(ci + 1) * vol];
            let wbase = (co * g.cin + ci) * ks;
            for (kz, ky, kx, t) in g.taps() {
                let wv = w[wbase + t];
                g.for_each_run(kz, ky, kx, |i, j, n| {
                    for (ov, xv) in o[j..j + n].iter_mut().zip(&xin[i..i + n]) {
                        *ov += wv * xv;
                    }
                });
            }
        }
    }
    out
}

/// Accumulates `dx`, `dw`, `db` from the output gradient `dy`.
pub(crate) fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let vol = g.volume();
    let ks = g.ksize();
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += dy[co * vol..(co + 1) * vol].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        for co in 0..g.cout {
            let d = &dy[co * vol..(co + 1) * vol];
            for ci in 0..g.cin {
                let xin = &x[ci * vol..(ci + 1) * vol];
                let wbase = (co * g.cin + ci) * ks;
                for (kz, ky, kx, t) in g.taps() {
                    let mut acc = 0.0;
                    g.for_each_run(kz, ky, kx, |i, j, n| {
                        acc += d[j..j + n].iter().zip(&xin[i..i + n]).map(|(a, b)| a * b).sum::<f64>();
                    });
                    dw[wbase + t] += acc;
                }
            }
        }
    }
    if let Some(dx) = dx {
        for co in 0..g.cout {
            let d = &dy[co * vol..(co + 1) * vol];
            for ci in 0..g.cin {
                let dxi = &mut dx[ci * vol..(ci + 1) * vol];
                let wbase = (co * g.cin + ci) * ks;
                for (kz, ky, kx, t) in g.taps() {
                    let wv = w[wbase + t];
                    g.for_each_run(kz, ky, kx, |i, j, n| {
                        for (xv, dv) in dxi[i..i + n].iter_mut().zip(&d[j..j + n]) {
                            *xv += wv * dv;
                        }
                    });
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution, used as the reference.
    fn conv_naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [d, h, wd] = g.space;
        let [kd, kh, kw] = g.kernel;
        let mut out = vec![0.0; g.cout * d * h * wd];
        for co in 0..g.cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = z as isize + a as isize - (kd / 2) as isize;
                                        let iy = y as isize + bb as isize - (kh / 2) as isize;
                                        let ix = xx as isize + c as isize - (kw / 2) as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * g.cin + ci) * kd + a) * kh + bb) * kw + c;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((co * d + z) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let g = ConvGeom { cin: 2, cout: 3, space: [3, 4, 5], kernel: [3, 3, 3] };
        let x: Vec<f64> = (0..2 * 60).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b = vec![0.1, -0.2, 0.3];
        let fast = conv3d_forward(&g, &x, &w, &b);
        let slow = conv_naive(&g, &x, &w, &b);
        for (a, c) in fast.iter().zip(&slow) {
            assert!((a - c).abs() < 1e-12);
        }
        let g2 = ConvGeom { cin: 1, cout: 2, space: [1, 5, 5], kernel: [1, 3, 3] };
        let x2: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let w2: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) * 0.05).collect();
        let b2 = vec![0.0, 1.0];
        assert_eq!(conv3d_forward(&g2, &x2, &w2, &b2).len(), 50);
        for (a, c) in conv3d_forward(&g2, &x2, &w2, &b2).iter().zip(&conv_naive(&g2, &x2, &w2, &b2)) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3×2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // bᵀ, 2×3
        let mut c2 = [0.0; 4];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
    }

    #[test]
    fn stable_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
