//! Direct 3x3 convolution kernels (zero padding 1, stride 1 or 2) plus the
//! matching input/weight gradient loops. Each output row accumulates all
//! three horizontal taps in one pass so the row stays cache-resident and
//! the inner loops are long enough to vectorize; the input-gradient pass
//! reuses the same row kernel with the taps flipped.

/// Output spatial size for kernel 3, padding 1: `floor((n - 1) / stride) + 1`.
pub fn conv_out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// `out[j] += k0*x[j-1] + k1*x[j] + k2*x[j+1]` with zero padding.
#[inline]
fn row_update_s1(out: &mut [f64], x: &[f64], k0: f64, k1: f64, k2: f64) {
    let w = out.len();
    debug_assert_eq!(x.len(), w);
    if w == 1 {
        out[0] = x[0].mul_add(k1, out[0]);
        return;
    }
    out[0] = x[1].mul_add(k2, x[0].mul_add(k1, out[0]));
    {
        let dst = &mut out[1..w - 1];
        let left = &x[..w - 2];
        let mid = &x[1..w - 1];
        let right = &x[2..];
        for (((o, a), b), c) in dst.iter_mut().zip(left).zip(mid).zip(right) {
            *o = c.mul_add(k2, b.mul_add(k1, a.mul_add(k0, *o)));
        }
    }
    out[w - 1] = x[w - 1].mul_add(k1, x[w - 2].mul_add(k0, out[w - 1]));
}

/// Stride-2 variant: `out[j] += k0*x[2j-1] + k1*x[2j] + k2*x[2j+1]`.
#[inline]
fn row_update_s2(out: &mut [f64], x: &[f64], k0: f64, k1: f64, k2: f64) {
    let ow = out.len();
    let w = x.len();
    out[0] = x[0].mul_add(k1, out[0]);
    if w > 1 {
        out[0] = x[1].mul_add(k2, out[0]);
    }
    // interior: 2j+1 < w  <=>  j < (w-1)/2
    let jmax = (w - 1) / 2;
    for j in 1..jmax.min(ow) {
        let ix = 2 * j;
        let acc = x[ix - 1].mul_add(k0, out[j]);
        let acc = x[ix].mul_add(k1, acc);
        out[j] = x[ix + 1].mul_add(k2, acc);
    }
    // tail column when the rightmost tap would fall off the row
    if jmax < ow && jmax >= 1 {
        let ix = 2 * jmax;
        let mut acc = x[ix - 1].mul_add(k0, out[jmax]);
        acc = x[ix].mul_add(k1, acc);
        if ix + 1 < w {
            acc = x[ix + 1].mul_add(k2, acc);
        }
        out[jmax] = acc;
    }
}

/// `out[j] += sum_t kt[t][0]*x[j-1] + kt[t][1]*x[j] + kt[t][2]*x[j+1]`
/// for up to four output rows sharing one input row; amortizes the input
/// loads so the loop is fused-multiply bound.
#[inline]
fn row_update_s1_x4(rows: &mut [&mut [f64]; 4], x: &[f64], kt: &[[f64; 3]; 4]) {
    let w = x.len();
    if w <= 2 {
        for (o, k) in rows.iter_mut().zip(kt) {
            row_update_s1(o, x, k[0], k[1], k[2]);
        }
        return;
    }
    {
        let [o0, o1, o2, o3] = rows;
        let [k0, k1, k2, k3] = kt;
            o0[0] = x[1].mul_add(k0[2], x[0].mul_add(k0[1], o0[0]));
            o1[0] = x[1].mul_add(k1[2], x[0].mul_add(k1[1], o1[0]));
            o2[0] = x[1].mul_add(k2[2], x[0].mul_add(k2[1], o2[0]));
            o3[0] = x[1].mul_add(k3[2], x[0].mul_add(k3[1], o3[0]));
            for j in 1..w - 1 {
                let (a, b, c) = (x[j - 1], x[j], x[j + 1]);
                o0[j] = c.mul_add(k0[2], b.mul_add(k0[1], a.mul_add(k0[0], o0[j])));
                o1[j] = c.mul_add(k1[2], b.mul_add(k1[1], a.mul_add(k1[0], o1[j])));
                o2[j] = c.mul_add(k2[2], b.mul_add(k2[1], a.mul_add(k2[0], o2[j])));
                o3[j] = c.mul_add(k3[2], b.mul_add(k3[1], a.mul_add(k3[0], o3[j])));
            }
            let (a, b) = (x[w - 2], x[w - 1]);
            o0[w - 1] = b.mul_add(k0[1], a.mul_add(k0[0], o0[w - 1]));
            o1[w - 1] = b.mul_add(k1[1], a.mul_add(k1[0], o1[w - 1]));
            o2[w - 1] = b.mul_add(k2[1], a.mul_add(k2[0], o2[w - 1]));
            o3[w - 1] = b.mul_add(k3[1], a.mul_add(k3[0], o3[w - 1]));
    }
}

/// Split four disjoint equal-length rows out of `buf`, given strictly
/// increasing start offsets.
#[inline]
fn four_rows(buf: &mut [f64], starts: [usize; 4], len: usize) -> [&mut [f64]; 4] {
    let (_, rest) = buf.split_at_mut(starts[0]);
    let (r0, rest) = rest.split_at_mut(len);
    let (_, rest) = rest.split_at_mut(starts[1] - starts[0] - len);
    let (r1, rest) = rest.split_at_mut(len);
    let (_, rest) = rest.split_at_mut(starts[2] - starts[1] - len);
    let (r2, rest) = rest.split_at_mut(len);
    let (_, rest) = rest.split_at_mut(starts[3] - starts[2] - len);
    let (r3, _) = rest.split_at_mut(len);
    [r0, r1, r2, r3]
}

/// x: [ci_n, h, w], weight: [co_n, ci_n, 3, 3], out: [co_n, oh, ow] (zeroed).
pub fn forward_single(
    x: &[f64],
    weight: &[f64],
    out: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let oh = conv_out_size(h, stride);
    let ow = conv_out_size(w, stride);
    let mut co_base = 0usize;
    // 4-wide output-channel blocks share each input row load
    while stride == 1 && co_base + 4 <= co_n {
        for ci in 0..ci_n {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let mut kt = [[[0.0f64; 3]; 4]; 3];
            for j in 0..4 {
                let wk = &weight[((co_base + j) * ci_n + ci) * 9..((co_base + j) * ci_n + ci) * 9 + 9];
                for kh in 0..3 {
                    kt[kh][j] = [wk[kh * 3], wk[kh * 3 + 1], wk[kh * 3 + 2]];
                }
            }
            for oy in 0..oh {
                let starts = [
                    (co_base * oh + oy) * ow,
                    ((co_base + 1) * oh + oy) * ow,
                    ((co_base + 2) * oh + oy) * ow,
                    ((co_base + 3) * oh + oy) * ow,
                ];
                let mut rows = four_rows(out, starts, ow);
                for kh in 0..3usize {
                    let iy = (oy + kh) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                    row_update_s1_x4(&mut rows, xrow, &kt[kh]);
                }
            }
        }
        co_base += 4;
    }
    for co in co_base..co_n {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..ci_n {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let wk = &weight[(co * ci_n + ci) * 9..(co * ci_n + ci) * 9 + 9];
            for oy in 0..oh {
                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                for kh in 0..3usize {
                    let iy = (oy * stride + kh) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                    let (k0, k1, k2) = (wk[kh * 3], wk[kh * 3 + 1], wk[kh * 3 + 2]);
                    if stride == 1 {
                        row_update_s1(orow, xrow, k0, k1, k2);
                    } else {
                        row_update_s2(orow, xrow, k0, k1, k2);
                    }
                }
            }
        }
    }
}

/// Gradient wrt the input. dx: [ci_n, h, w] (accumulated into),
/// dout: [co_n, oh, ow].
pub fn backward_input_single(
    dout: &[f64],
    weight: &[f64],
    dx: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let oh = conv_out_size(h, stride);
    let ow = conv_out_size(w, stride);
    if stride == 1 {
        // correlation with the 180-degree flipped kernel
        for ci in 0..ci_n {
            let dxplane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for co in 0..co_n {
                let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
                let wk = &weight[(co * ci_n + ci) * 9..(co * ci_n + ci) * 9 + 9];
                for iy in 0..h {
                    let dxrow = &mut dxplane[iy * w..(iy + 1) * w];
                    for kh in 0..3usize {
                        let oy = iy as isize - (kh as isize - 1);
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let drow = &dplane[oy as usize * ow..(oy as usize + 1) * ow];
                        // dx[ix] += w[kw] * dout[ix - (kw-1)]: taps flipped
                        row_update_s1(dxrow, drow, wk[kh * 3 + 2], wk[kh * 3 + 1], wk[kh * 3]);
                    }
                }
            }
        }
    } else {
        for ci in 0..ci_n {
            let dxplane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for co in 0..co_n {
                let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
                let wk = &weight[(co * ci_n + ci) * 9..(co * ci_n + ci) * 9 + 9];
                for oy in 0..oh {
                    let drow = &dplane[oy * ow..(oy + 1) * ow];
                    for kh in 0..3usize {
                        let iy = (oy * stride + kh) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dxrow = &mut dxplane[iy as usize * w..(iy as usize + 1) * w];
                        for kw in 0..3usize {
                            let alpha = wk[kh * 3 + kw];
                            let dxo = kw as isize - 1;
                            for (j, d) in drow.iter().enumerate() {
                                let ix = (j * stride) as isize + dxo;
                                if ix >= 0 && ix < w as isize {
                                    dxrow[ix as usize] = d.mul_add(alpha, dxrow[ix as usize]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient wrt the weights. dw: [co_n, ci_n, 3, 3] (accumulated into).
pub fn backward_weight_single(
    x: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let oh = conv_out_size(h, stride);
    let ow = conv_out_size(w, stride);
    for co in 0..co_n {
        let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..ci_n {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let mut acc = [0.0f64; 9];
            for oy in 0..oh {
                let drow = &dplane[oy * ow..(oy + 1) * ow];
                for kh in 0..3usize {
                    let iy = (oy * stride + kh) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                    let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
                    if stride == 1 {
                        if w == 1 {
                            a1 = drow[0] * xrow[0];
                        } else {
                            // all three shifted dot products in one pass
                            let dmid = &drow[1..w - 1];
                            let xl = &xrow[..w - 2];
                            let xm = &xrow[1..w - 1];
                            let xr = &xrow[2..];
                            for (((d, l), m), r) in dmid.iter().zip(xl).zip(xm).zip(xr) {
                                a0 = d.mul_add(*l, a0);
                                a1 = d.mul_add(*m, a1);
                                a2 = d.mul_add(*r, a2);
                            }
                            a0 = drow[w - 1].mul_add(xrow[w - 2], a0);
                            a1 = drow[0].mul_add(xrow[0], a1);
                            a1 = drow[w - 1].mul_add(xrow[w - 1], a1);
                            a2 = drow[0].mul_add(xrow[1], a2);
                        }
                    } else {
                        for (j, d) in drow.iter().enumerate() {
                            let ix = (j * stride) as isize;
                            if ix >= 1 {
                                a0 = d.mul_add(xrow[ix as usize - 1], a0);
                            }
                            a1 = d.mul_add(xrow[ix as usize], a1);
                            if (ix as usize) + 1 < w {
                                a2 = d.mul_add(xrow[ix as usize + 1], a2);
                            }
                        }
                    }
                    acc[kh * 3] += a0;
                    acc[kh * 3 + 1] += a1;
                    acc[kh * 3 + 2] += a2;
                }
            }
            let wk = &mut dw[(co * ci_n + ci) * 9..(co * ci_n + ci) * 9 + 9];
            for (slot, a) in wk.iter_mut().zip(acc.iter()) {
                *slot += a;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference forward written as the plain five-loop definition.
    fn conv_naive(
        x: &[f64],
        weight: &[f64],
        ci_n: usize,
        co_n: usize,
        h: usize,
        w: usize,
        stride: usize,
    ) -> Vec<f64> {
        let oh = conv_out_size(h, stride);
        let ow = conv_out_size(w, stride);
        let mut out = vec![0.0; co_n * oh * ow];
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for kh in 0..3usize {
                            for kw in 0..3usize {
                                let iy = (oy * stride) as isize + kh as isize - 1;
                                let ix = (ox * stride) as isize + kw as isize - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * weight[((co * ci_n + ci) * 3 + kh) * 3 + kw];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Reference input gradient via the transposed naive loops.
    fn dinput_naive(
        dout: &[f64],
        weight: &[f64],
        ci_n: usize,
        co_n: usize,
        h: usize,
        w: usize,
        stride: usize,
    ) -> Vec<f64> {
        let oh = conv_out_size(h, stride);
        let ow = conv_out_size(w, stride);
        let mut dx = vec![0.0; ci_n * h * w];
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dout[(co * oh + oy) * ow + ox];
                    for ci in 0..ci_n {
                        for kh in 0..3usize {
                            for kw in 0..3usize {
                                let iy = (oy * stride) as isize + kh as isize - 1;
                                let ix = (ox * stride) as isize + kw as isize - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[(ci * h + iy as usize) * w + ix as usize] +=
                                    g * weight[((co * ci_n + ci) * 3 + kh) * 3 + kw];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn pseudo(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    const CASES: [(usize, usize, usize, usize, usize); 6] = [
        (1, 1, 4, 4, 1),
        (3, 5, 6, 7, 1),
        (3, 5, 6, 8, 2),
        (2, 4, 5, 5, 2),
        (1, 2, 1, 1, 1),
        (2, 3, 7, 2, 2),
    ];

    #[test]
    fn forward_matches_naive_definition() {
        for &(ci, co, h, w, stride) in &CASES {
            let x = pseudo(1, ci * h * w);
            let wt = pseudo(2, co * ci * 9);
            let oh = conv_out_size(h, stride);
            let ow = conv_out_size(w, stride);
            let mut out = vec![0.0; co * oh * ow];
            forward_single(&x, &wt, &mut out, ci, co, h, w, stride);
            let want = conv_naive(&x, &wt, ci, co, h, w, stride);
            for (i, (a, b)) in out.iter().zip(want.iter()).enumerate() {
                assert!((a - b).abs() < 1e-12, "case {ci},{co},{h},{w},s{stride} idx {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_naive_definition() {
        for &(ci, co, h, w, stride) in &CASES {
            let wt = pseudo(2, co * ci * 9);
            let oh = conv_out_size(h, stride);
            let ow = conv_out_size(w, stride);
            let dout = pseudo(3, co * oh * ow);
            let mut dx = vec![0.0; ci * h * w];
            backward_input_single(&dout, &wt, &mut dx, ci, co, h, w, stride);
            let want = dinput_naive(&dout, &wt, ci, co, h, w, stride);
            for (i, (a, b)) in dx.iter().zip(want.iter()).enumerate() {
                assert!((a - b).abs() < 1e-12, "case {ci},{co},{h},{w},s{stride} idx {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn weight_gradient_matches_direct_sums() {
        for &(ci, co, h, w, stride) in &CASES {
            let x = pseudo(1, ci * h * w);
            let oh = conv_out_size(h, stride);
            let ow = conv_out_size(w, stride);
            let dout = pseudo(3, co * oh * ow);
            let mut dw = vec![0.0; co * ci * 9];
            backward_weight_single(&x, &dout, &mut dw, ci, co, h, w, stride);
            // direct definition
            let mut want = vec![0.0; co * ci * 9];
            for co_ in 0..co {
                for ci_ in 0..ci {
                    for kh in 0..3usize {
                        for kw in 0..3usize {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let iy = (oy * stride) as isize + kh as isize - 1;
                                    let ix = (ox * stride) as isize + kw as isize - 1;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += dout[(co_ * oh + oy) * ow + ox]
                                        * x[(ci_ * h + iy as usize) * w + ix as usize];
                                }
                            }
                            want[((co_ * ci + ci_) * 3 + kh) * 3 + kw] = acc;
                        }
                    }
                }
            }
            for (i, (a, b)) in dw.iter().zip(want.iter()).enumerate() {
                assert!((a - b).abs() < 1e-12, "case {ci},{co},{h},{w},s{stride} idx {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn odd_size_stride2_output_dims() {
        assert_eq!(conv_out_size(7, 2), 4);
        assert_eq!(conv_out_size(8, 2), 4);
        assert_eq!(conv_out_size(8, 1), 8);
    }
}
