//! Convolution kernel throughput at the layer shapes of the default network.

use stemnet_core::ops::*;
use stemnet_core::Tensor;
use std::time::Instant;
fn main() {
    for &(s, ci, co) in &[(96usize, 8usize, 8usize), (96, 16, 8), (48, 16, 16), (48, 4, 4), (48, 8, 4)] {
        let spec = ConvSpec::same3(ci, co);
        let x = Tensor::<f32>::from_fn(&[1, ci, s, s, s], |i| ((i % 97) as f32) * 0.01);
        let w = Tensor::<f32>::from_fn(&spec.weight_shape(), |i| ((i % 13) as f32) * 0.01);
        let b = Tensor::<f32>::zeros(&[co]);
        let t = Instant::now();
        let y = conv3d_forward(&x, &w, &b, &spec).unwrap();
        let f = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv3d_backward_params(&x, &y, &spec).unwrap();
        let bw = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv3d_backward_input(&w, &y, &spec, [s, s, s]).unwrap();
        let bx = t.elapsed().as_secs_f64();
        let macs = (s * s * s * ci * co * 27) as f64;
        println!("s={s} ci={ci} co={co}: fwd {:.3}s ({:.1} GMAC/s) gw {:.3}s ({:.1}) gx {:.3}s ({:.1})", f, macs / f / 1e9, bw, macs / bw / 1e9, bx, macs / bx / 1e9);
    }
}
