use std::time::Instant;
fn main() {
    // representative heavy layer: 32x(32->16)@64 fwd, then both backward passes
    let (b, ci, co, h, w) = (32usize, 32usize, 16usize, 64usize, 64usize);
    let x = vec![0.5f64; b * ci * h * w];
    let wt = vec![0.01f64; co * ci * 9];
    let mut out = vec![0.0f64; b * co * h * w];
    let t0 = Instant::now();
    for bi in 0..b {
        wmaploc::diffcore::bench_forward(&x[bi*ci*h*w..(bi+1)*ci*h*w], &wt, &mut out[bi*co*h*w..(bi+1)*co*h*w], ci, co, h, w, 1);
    }
    let fwd = t0.elapsed().as_secs_f64();
    let gmac = (b * co * ci * 9 * h * w) as f64 / 1e9;
    let mut dx = vec![0.0f64; b * ci * h * w];
    let t0 = Instant::now();
    for bi in 0..b {
        wmaploc::diffcore::bench_backward_input(&out[bi*co*h*w..(bi+1)*co*h*w], &wt, &mut dx[bi*ci*h*w..(bi+1)*ci*h*w], ci, co, h, w, 1);
    }
    let bwd_x = t0.elapsed().as_secs_f64();
    let mut dw = vec![0.0f64; co * ci * 9];
    let t0 = Instant::now();
    for bi in 0..b {
        wmaploc::diffcore::bench_backward_weight(&x[bi*ci*h*w..(bi+1)*ci*h*w], &out[bi*co*h*w..(bi+1)*co*h*w], &mut dw, ci, co, h, w, 1);
    }
    let bwd_w = t0.elapsed().as_secs_f64();
    println!("fwd {:.3}s ({:.1} GF/s)  bwd_x {:.3}s ({:.1})  bwd_w {:.3}s ({:.1})",
        fwd, 2.0*gmac/fwd, bwd_x, 2.0*gmac/bwd_x, bwd_w, 2.0*gmac/bwd_w);
}
