//! Inner loops of the stride-1 convolution kernels.
//!
//! Every element type has a portable implementation. On x86-64 targets
//! compiled with AVX2 and FMA, `f32` uses explicit 256-bit intrinsics; the
//! auto-vectorizer does not manage to keep the register-blocked
//! accumulators of these loops in vector registers.

/// Output voxels handled per register tile.
pub const LANES: usize = 16;

/// Flat offsets (relative to a tile origin) of every `(channel, tap)` read
/// by one output tile, plus the largest one for bounds checking.
#[derive(Debug, Clone)]
pub struct TapTable {
    pub offsets: alloc::vec::Vec<usize>,
    pub reach: usize,
}

/// Geometry of one weight-gradient reduction: a padded input channel
/// correlated against output-gradient rows.
#[derive(Debug, Clone, Copy)]
pub struct GradGeom {
    /// Padded input extents `(D, H, W)`.
    pub pdims: [usize; 3],
    /// Flat offset of the input channel inside the padded buffer.
    pub channel_base: usize,
    /// Output extents.
    pub out: [usize; 3],
    /// Elements per output-gradient channel.
    pub vol: usize,
}

pub trait Kernels: Sized + Copy {
    /// `acc[c][j] += Σ_t w[t·CB + c] · x[base + offsets[t] + j]` for `j < LANES`.
    fn conv_tile<const CB: usize>(x: &[Self], base: usize, taps: &TapTable, w: &[Self], acc: &mut [[Self; LANES]; CB]);

    /// `out[c·KW + dx] = Σ_o g[c·vol + o] · x[channel_base + shift(o) + (dz, dy, dx)]`
    /// summed over every output position `o`.
    fn grad_taps<const CB: usize, const KW: usize>(
        geom: &GradGeom,
        x: &[Self],
        g: &[Self],
        dz: usize,
        dy: usize,
        out: &mut [Self],
    );
}

mod portable {
    use super::{GradGeom, TapTable, LANES};
    use crate::scalar::Scalar;

    #[inline(always)]
    pub fn conv_tile<T: Scalar, const CB: usize>(
        x: &[T],
        base: usize,
        taps: &TapTable,
        w: &[T],
        acc: &mut [[T; LANES]; CB],
    ) {
        for (t, &off) in taps.offsets.iter().enumerate() {
            let xs = &x[base + off..base + off + LANES];
            for c in 0..CB {
                let wc = w[t * CB + c];
                for (a, &xv) in acc[c].iter_mut().zip(xs) {
                    *a = wc.mul_add(xv, *a);
                }
            }
        }
    }

    #[inline(always)]
    pub fn grad_taps<T: Scalar, const CB: usize, const KW: usize>(
        geom: &GradGeom,
        x: &[T],
        g: &[T],
        dz: usize,
        dy: usize,
        out: &mut [T],
    ) {
        let [_, hp, wp] = geom.pdims;
        let [od_n, oh_n, ow_n] = geom.out;
        let mut sums = [[T::ZERO; KW]; CB];
        for od in 0..od_n {
            for oh in 0..oh_n {
                let xrow = geom.channel_base + ((od + dz) * hp + oh + dy) * wp;
                let grow = (od * oh_n + oh) * ow_n;
                for c in 0..CB {
                    let gr = &g[c * geom.vol + grow..][..ow_n];
                    for dx in 0..KW {
                        let xr = &x[xrow + dx..][..ow_n];
                        let mut s = sums[c][dx];
                        for (&gv, &xv) in gr.iter().zip(xr) {
                            s = gv.mul_add(xv, s);
                        }
                        sums[c][dx] = s;
                    }
                }
            }
        }
        for c in 0..CB {
            for dx in 0..KW {
                out[c * KW + dx] = sums[c][dx];
            }
        }
    }
}

impl Kernels for f64 {
    #[inline(always)]
    fn conv_tile<const CB: usize>(x: &[Self], base: usize, taps: &TapTable, w: &[Self], acc: &mut [[Self; LANES]; CB]) {
        portable::conv_tile(x, base, taps, w, acc)
    }

    #[inline(always)]
    fn grad_taps<const CB: usize, const KW: usize>(
        geom: &GradGeom,
        x: &[Self],
        g: &[Self],
        dz: usize,
        dy: usize,
        out: &mut [Self],
    ) {
        portable::grad_taps::<f64, CB, KW>(geom, x, g, dz, dy, out)
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma")))]
impl Kernels for f32 {
    #[inline(always)]
    fn conv_tile<const CB: usize>(x: &[Self], base: usize, taps: &TapTable, w: &[Self], acc: &mut [[Self; LANES]; CB]) {
        portable::conv_tile(x, base, taps, w, acc)
    }

    #[inline(always)]
    fn grad_taps<const CB: usize, const KW: usize>(
        geom: &GradGeom,
        x: &[Self],
        g: &[Self],
        dz: usize,
        dy: usize,
        out: &mut [Self],
    ) {
        portable::grad_taps::<f32, CB, KW>(geom, x, g, dz, dy, out)
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
mod avx {
    use core::arch::x86_64::*;

    use super::{GradGeom, Kernels, TapTable, LANES};
    use crate::scalar::Scalar;

    /// Sum of the eight lanes.
    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    impl Kernels for f32 {
        #[inline(always)]
        fn conv_tile<const CB: usize>(
            x: &[f32],
            base: usize,
            taps: &TapTable,
            w: &[f32],
            acc: &mut [[f32; LANES]; CB],
        ) {
            assert!(base + taps.reach + LANES <= x.len(), "conv tile reads past the padded input");
            assert!(w.len() >= taps.offsets.len() * CB, "packed weights too short");
            // SAFETY: the asserts above bound every load: offsets ≤ reach and
            // each tap reads LANES floats from base + offset; weights are
            // read at t·CB + c < offsets.len()·CB.
            unsafe {
                let mut r = [[_mm256_setzero_ps(); 2]; CB];
                for c in 0..CB {
                    r[c][0] = _mm256_loadu_ps(acc[c].as_ptr());
                    r[c][1] = _mm256_loadu_ps(acc[c].as_ptr().add(8));
                }
                let xb = x.as_ptr().add(base);
                let mut wp = w.as_ptr();
                for &off in &taps.offsets {
                    let x0 = _mm256_loadu_ps(xb.add(off));
                    let x1 = _mm256_loadu_ps(xb.add(off + 8));
                    for c in 0..CB {
                        let wc = _mm256_broadcast_ss(&*wp.add(c));
                        r[c][0] = _mm256_fmadd_ps(wc, x0, r[c][0]);
                        r[c][1] = _mm256_fmadd_ps(wc, x1, r[c][1]);
                    }
                    wp = wp.add(CB);
                }
                for c in 0..CB {
                    _mm256_storeu_ps(acc[c].as_mut_ptr(), r[c][0]);
                    _mm256_storeu_ps(acc[c].as_mut_ptr().add(8), r[c][1]);
                }
            }
        }

        #[inline(always)]
        fn grad_taps<const CB: usize, const KW: usize>(
            geom: &GradGeom,
            x: &[f32],
            g: &[f32],
            dz: usize,
            dy: usize,
            out: &mut [f32],
        ) {
            let [pd, hp, wp] = geom.pdims;
            let [od_n, oh_n, ow_n] = geom.out;
            assert!(od_n + dz <= pd && oh_n + dy <= hp && ow_n + KW - 1 <= wp, "taps exceed padded input");
            assert!(geom.channel_base + pd * hp * wp <= x.len(), "channel outside padded input");
            assert!((CB - 1) * geom.vol + od_n * oh_n * ow_n <= g.len(), "gradient block too short");
            assert!(out.len() >= CB * KW);
            let chunks = ow_n / 8;
            // SAFETY: row reads stay inside [xrow, xrow + ow_n + KW − 1) ⊂ the
            // channel (checked above) and [grow, grow + ow_n) of each
            // gradient channel.
            unsafe {
                let mut r = [[_mm256_setzero_ps(); KW]; CB];
                let mut tail = [[0.0f32; KW]; CB];
                for od in 0..od_n {
                    for oh in 0..oh_n {
                        let xrow = x.as_ptr().add(geom.channel_base + ((od + dz) * hp + oh + dy) * wp);
                        let grow = (od * oh_n + oh) * ow_n;
                        for k in 0..chunks {
                            let mut xv = [_mm256_setzero_ps(); KW];
                            for dx in 0..KW {
                                xv[dx] = _mm256_loadu_ps(xrow.add(k * 8 + dx));
                            }
                            for c in 0..CB {
                                let gv = _mm256_loadu_ps(g.as_ptr().add(c * geom.vol + grow + k * 8));
                                for dx in 0..KW {
                                    r[c][dx] = _mm256_fmadd_ps(gv, xv[dx], r[c][dx]);
                                }
                            }
                        }
                        for ow in chunks * 8..ow_n {
                            for c in 0..CB {
                                let gv = *g.get_unchecked(c * geom.vol + grow + ow);
                                for dx in 0..KW {
                                    tail[c][dx] = Scalar::mul_add(gv, *xrow.add(ow + dx), tail[c][dx]);
                                }
                            }
                        }
                    }
                }
                for c in 0..CB {
                    for dx in 0..KW {
                        out[c * KW + dx] = hsum(r[c][dx]) + tail[c][dx];
                    }
                }
            }
        }
    }
}
