//! Matrix products. `f32` products use a packed AVX-512 kernel when the CPU
//! has one (ndarray's built-in multiply stops at AVX2); everything else goes
//! through ndarray.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayBase, ArrayView2, ArrayViewMut2, Data, Ix2};

use crate::Scalar;

/// `c ← a·b`, or `c ← c + a·b` when `accumulate`.
pub fn matmul_into<T, A, B>(
    c: &mut ArrayViewMut2<'_, T>,
    a: &ArrayBase<A, Ix2>,
    b: &ArrayBase<B, Ix2>,
    accumulate: bool,
) where
    T: Scalar,
    A: Data<Elem = T>,
    B: Data<Elem = T>,
{
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    assert_eq!(c.dim(), (a.nrows(), b.ncols()), "output shape mismatch");
    T::matmul_into(c, a.view(), b.view(), accumulate);
}

pub fn matmul<T, A, B>(a: &ArrayBase<A, Ix2>, b: &ArrayBase<B, Ix2>) -> Array2<T>
where
    T: Scalar,
    A: Data<Elem = T>,
    B: Data<Elem = T>,
{
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(&mut c.view_mut(), a, b, false);
    c
}

pub(crate) fn ndarray_matmul_into<T: Scalar>(
    c: &mut ArrayViewMut2<'_, T>,
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a, &b, beta, c);
}

pub(crate) fn f32_matmul_into(
    c: &mut ArrayViewMut2<'_, f32>,
    a: ArrayView2<'_, f32>,
    b: ArrayView2<'_, f32>,
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if avx512::available() && a.nrows() > 0 && b.ncols() > 0 && a.ncols() > 0 {
            // SAFETY: the CPU supports AVX-512F and the shapes were checked.
            unsafe { avx512::matmul_into(c, a, b, accumulate) };
            return;
        }
    }
    ndarray_matmul_into(c, a, b, accumulate);
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    use ndarray::{ArrayView2, ArrayViewMut2};

    const MR: usize = 8;
    const NR: usize = 32;
    const KC: usize = 256;

    pub fn available() -> bool {
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| std::is_x86_feature_detected!("avx512f"))
    }

    /// `MR × NR` block of `Σ_p a[i, p] · b[p, ..]` where `a[i, p]` sits at
    /// `ap + i·ars + p·acs` and `b` is a packed `kc × NR` panel. Reading `a`
    /// in place saves packing it for every row block, which dominates when
    /// `k` is small.
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn block(kc: usize, ap: *const f32, ars: isize, acs: isize, bp: *const f32) -> [[__m512; 2]; MR] {
        let mut acc = [[_mm512_setzero_ps(); 2]; MR];
        let rows: [*const f32; MR] = std::array::from_fn(|i| ap.offset(i as isize * ars));
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(bp.add(p * NR));
            let b1 = _mm512_loadu_ps(bp.add(p * NR + 16));
            let off = p as isize * acs;
            for (row, a) in acc.iter_mut().zip(rows) {
                let av = _mm512_set1_ps(*a.offset(off));
                row[0] = _mm512_fmadd_ps(av, b0, row[0]);
                row[1] = _mm512_fmadd_ps(av, b1, row[1]);
            }
        }
        acc
    }

    /// # Safety
    /// Requires AVX-512F and non-empty, shape-compatible operands.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn matmul_into(
        c: &mut ArrayViewMut2<'_, f32>,
        a: ArrayView2<'_, f32>,
        b: ArrayView2<'_, f32>,
        accumulate: bool,
    ) {
        let (m, k) = a.dim();
        let n = b.ncols();
        let (ars, acs) = (a.strides()[0], a.strides()[1]);
        let (brs, bcs) = (b.strides()[0], b.strides()[1]);
        let (crs, ccs) = (c.strides()[0], c.strides()[1]);
        let (ap0, bp0, cp0) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let panels = n.div_ceil(NR);
        let mut bpack = vec![0.0f32; panels * NR * KC.min(k)];
        let mut apack = [0.0f32; MR * KC];
        let mut tile = [0.0f32; MR * NR];
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            for jp in 0..panels {
                let dst = &mut bpack[jp * NR * kc..(jp + 1) * NR * kc];
                let cols = NR.min(n - jp * NR);
                for p in 0..kc {
                    let src = bp0.offset((pc + p) as isize * brs + (jp * NR) as isize * bcs);
                    let row = &mut dst[p * NR..(p + 1) * NR];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if j < cols { *src.offset(j as isize * bcs) } else { 0.0 };
                    }
                }
            }
            let overwrite = pc == 0 && !accumulate;
            for i0 in (0..m).step_by(MR) {
                let rows = MR.min(m - i0);
                // Full row blocks are read in place; the ragged last block
                // is zero-padded into `apack` (laid out with ars = 1, acs = MR).
                let (a_blk, a_rs, a_cs) = if rows == MR {
                    (ap0.offset(i0 as isize * ars + pc as isize * acs), ars, acs)
                } else {
                    for p in 0..kc {
                        for i in 0..MR {
                            apack[p * MR + i] = if i < rows {
                                *ap0.offset((i0 + i) as isize * ars + (pc + p) as isize * acs)
                            } else {
                                0.0
                            };
                        }
                    }
                    (apack.as_ptr(), 1, MR as isize)
                };
                for jp in 0..panels {
                    let acc = block(kc, a_blk, a_rs, a_cs, bpack.as_ptr().add(jp * NR * kc));
                    let cols = NR.min(n - jp * NR);
                    if ccs == 1 {
                        let lo: __mmask16 = if cols >= 16 { 0xffff } else { (1u16 << cols) - 1 };
                        let hi: __mmask16 = if cols >= NR {
                            0xffff
                        } else if cols > 16 {
                            (1u16 << (cols - 16)) - 1
                        } else {
                            0
                        };
                        for (i, row) in acc.iter().enumerate().take(rows) {
                            let crow = cp0.offset((i0 + i) as isize * crs + (jp * NR) as isize);
                            for (h, (mask, v)) in [(lo, row[0]), (hi, row[1])].into_iter().enumerate() {
                                let dst = crow.add(h * 16);
                                let out = if overwrite {
                                    v
                                } else {
                                    _mm512_add_ps(_mm512_maskz_loadu_ps(mask, dst), v)
                                };
                                _mm512_mask_storeu_ps(dst, mask, out);
                            }
                        }
                    } else {
                        for (i, row) in acc.iter().enumerate() {
                            _mm512_storeu_ps(tile.as_mut_ptr().add(i * NR), row[0]);
                            _mm512_storeu_ps(tile.as_mut_ptr().add(i * NR + 16), row[1]);
                        }
                        for i in 0..rows {
                            let crow = cp0.offset((i0 + i) as isize * crs + (jp * NR) as isize * ccs);
                            for (j, &v) in tile[i * NR..i * NR + cols].iter().enumerate() {
                                let dst = crow.offset(j as isize * ccs);
                                *dst = if overwrite { v } else { *dst + v };
                            }
                        }
                    }
                }
            }
        }
    }
}
