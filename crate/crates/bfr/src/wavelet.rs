//! Orthonormal single-level 2-D Haar transforms.
//!
//! Each 2x2 block is projected onto four orthonormal basis vectors, so the
//! transform conserves energy exactly and its adjoint equals its inverse.
//! Multi-level behavior comes from callers applying [`dwt2`] per stage.

use crate::error::{Error, Result};
use crate::tensor::{concat, Scalar, Tensor};

/// The four half-resolution subbands of one analysis step.
///
/// `ll` is the 2x2 block average (x2), `lh` the vertical difference,
/// `hl` the horizontal difference, `hh` the diagonal.
pub struct SubbandQuad<T: Scalar> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

/// Forward Haar analysis of `[b,c,h,w]` (h, w even).
pub fn dwt2<T: Scalar>(x: &Tensor<T>) -> Result<SubbandQuad<T>> {
    let stacked = x.dwt2_stack()?;
    let c = x.shape()[1];
    Ok(SubbandQuad {
        ll: stacked.narrow(1, 0, c)?,
        lh: stacked.narrow(1, c, c)?,
        hl: stacked.narrow(1, 2 * c, c)?,
        hh: stacked.narrow(1, 3 * c, c)?,
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Scalar>(q: &SubbandQuad<T>) -> Result<Tensor<T>> {
    for (name, t) in [("lh", &q.lh), ("hl", &q.hl), ("hh", &q.hh)] {
        if t.shape() != q.ll.shape() {
            return Err(Error::ShapeMismatch {
                op: "idwt2 subbands",
                lhs: q.ll.shape().to_vec(),
                rhs: {
                    let _ = name;
                    t.shape().to_vec()
                },
            });
        }
    }
    concat(&[&q.ll, &q.lh, &q.hl, &q.hh], 1)?.idwt2_stack()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_image(rng: &mut StdRng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn constant_block_goes_to_ll_only() {
        let x = Tensor::<f32>::new(vec![1.0, 1.0, 1.0, 1.0], &[1, 1, 2, 2]).unwrap();
        let q = dwt2(&x).unwrap();
        assert_eq!(q.ll.data(), &[2.0]);
        assert_eq!(q.lh.data(), &[0.0]);
        assert_eq!(q.hl.data(), &[0.0]);
        assert_eq!(q.hh.data(), &[0.0]);
    }

    #[test]
    fn horizontal_difference_lands_in_hl() {
        // Hand oracle via the 2x2 Haar matrix: rows [[1,-1],[1,-1]] project
        // onto the horizontal-difference basis vector only.
        let x = Tensor::<f32>::new(vec![1.0, -1.0, 1.0, -1.0], &[1, 1, 2, 2]).unwrap();
        let q = dwt2(&x).unwrap();
        assert_eq!(q.hl.data(), &[2.0]);
        assert_eq!(q.ll.data(), &[0.0]);
        assert_eq!(q.lh.data(), &[0.0]);
        assert_eq!(q.hh.data(), &[0.0]);
    }

    #[test]
    fn energy_conserved_on_random_8x8() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_image(&mut rng, &[1, 1, 8, 8]);
        let q = dwt2(&x).unwrap();
        let e_in: f32 = x.data().iter().map(|v| v * v).sum();
        let e_out: f32 = [&q.ll, &q.lh, &q.hl, &q.hh]
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum();
        assert!((e_in - e_out).abs() < 1e-5, "{e_in} vs {e_out}");
    }

    #[test]
    fn round_trip_on_random_rgb() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = rand_image(&mut rng, &[1, 3, 64, 64]);
        let y = idwt2(&dwt2(&x).unwrap()).unwrap();
        let max_err = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-5, "max abs error {max_err}");
    }

    #[test]
    fn zero_subbands_give_zero_image() {
        let z = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let q = SubbandQuad {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert!(idwt2(&q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ll_only_reconstructs_constant_image() {
        let x = Tensor::<f32>::new(vec![0.5; 16], &[1, 1, 4, 4]).unwrap();
        let q = dwt2(&x).unwrap();
        let q = SubbandQuad {
            ll: q.ll,
            lh: Tensor::zeros(&[1, 1, 2, 2]),
            hl: Tensor::zeros(&[1, 1, 2, 2]),
            hh: Tensor::zeros(&[1, 1, 2, 2]),
        };
        let y = idwt2(&q).unwrap();
        for &v in y.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(dwt2(&x).is_err());
    }

    #[test]
    fn subband_shape_mismatch_rejected() {
        let q = SubbandQuad {
            ll: Tensor::<f32>::zeros(&[1, 1, 2, 2]),
            lh: Tensor::zeros(&[1, 1, 2, 2]),
            hl: Tensor::zeros(&[1, 1, 4, 4]),
            hh: Tensor::zeros(&[1, 1, 2, 2]),
        };
        assert!(idwt2(&q).is_err());
    }

    #[test]
    fn orthonormality_preserves_inner_products() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..4 {
            let x = rand_image(&mut rng, &[1, 2, 8, 8]);
            let y = rand_image(&mut rng, &[1, 2, 8, 8]);
            let qx = dwt2(&x).unwrap();
            let qy = dwt2(&y).unwrap();
            let ip_in: f32 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let ip_out: f32 = [(&qx.ll, &qy.ll), (&qx.lh, &qy.lh), (&qx.hl, &qy.hl), (&qx.hh, &qy.hh)]
                .iter()
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f32>())
                .sum();
            assert!((ip_in - ip_out).abs() < 1e-4);
        }
    }

    #[test]
    fn adjoint_identity_in_f64() {
        // The gradient of sum(w . dwt2(x)) w.r.t. x must equal idwt2(w).
        let mut rng = StdRng::seed_from_u64(10);
        let n = 2 * 6 * 6;
        let xd: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::<f64>::var(xd, &[1, 2, 6, 6]).unwrap();
        let wd: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::<f64>::new(wd, &[1, 8, 3, 3]).unwrap();

        x.dwt2_stack().unwrap().mul(&w).unwrap().sum_all().backward().unwrap();
        let grad = x.grad().unwrap();
        let expect = w.idwt2_stack().unwrap();
        for (g, e) in grad.iter().zip(expect.data()) {
            assert!((g - e).abs() < 1e-6);
        }
    }
}
