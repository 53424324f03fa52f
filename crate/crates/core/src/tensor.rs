//! Dense 4-D tensors in fixed (n, c, h, w) row-major layout.
//!
//! Every activation, gradient and parameter in this crate is carried by
//! [`Tensor`]. Reductions accumulate in f64 and round back to f32.

use crate::error::{Error, Result};

/// Extents of a 4-D tensor: batch, channels, rows, cols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Shape> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all extents must be positive, got ({n},{c},{h},{w})"
            )));
        }
        n.checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::Shape(format!("element count overflows: ({n},{c},{h},{w})")))?;
        Ok(Shape { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

/// Dense f32 tensor, contiguous row-major in (n, c, h, w) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new_filled(shape: Shape, value: f32) -> Tensor {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::new_filled(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// self += other, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().copied()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel channel norm: output (n,1,h,w) where each element is
    /// sqrt(sum_c x^2 + eps^2). The eps^2 term keeps the all-zero pixel
    /// differentiable with norm eps.
    pub fn l2_norm_over_channels(&self, eps: f32) -> Tensor {
        debug_assert!(eps > 0.0);
        let s = self.shape;
        let out_shape = Shape::new(s.n, 1, s.h, s.w).unwrap();
        let mut out = Tensor::zeros(out_shape);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = (eps as f64) * (eps as f64);
                    for c in 0..s.c {
                        let v = self.get(n, c, y, x) as f64;
                        acc += v * v;
                    }
                    out.set(n, 0, y, x, acc.sqrt() as f32);
                }
            }
        }
        out
    }

    /// Global average pooling: output (n,c,1,1), mean over all spatial positions.
    pub fn reduce_spatial_mean(&self) -> Tensor {
        let s = self.shape;
        let out_shape = Shape::new(s.n, s.c, 1, 1).unwrap();
        let mut out = Tensor::zeros(out_shape);
        let area = (s.h * s.w) as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = s.index(n, c, 0, 0);
                let plane = &self.data[base..base + s.h * s.w];
                let sum: f64 = plane.iter().map(|&v| v as f64).sum();
                out.set(n, c, 0, 0, (sum / area) as f32);
            }
        }
        out
    }

    /// Unpool a (n,c,1,1) tensor by replicating its value at every spatial position.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if s.h != 1 || s.w != 1 {
            return Err(Error::Shape(format!(
                "broadcast_spatial requires 1x1 spatial input, got {}x{}",
                s.h, s.w
            )));
        }
        let out_shape = Shape::new(s.n, s.c, h, w)?;
        let mut out = Tensor::zeros(out_shape);
        for n in 0..s.n {
            for c in 0..s.c {
                let v = self.get(n, c, 0, 0);
                let base = out_shape.index(n, c, 0, 0);
                out.data[base..base + h * w].iter_mut().for_each(|e| *e = v);
            }
        }
        Ok(out)
    }

    /// Channel concatenation: a's channels first, then b's.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::Shape(format!(
                "concat_channels mismatch: {:?} vs {:?}",
                sa, sb
            )));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)?;
        let mut out = Tensor::zeros(out_shape);
        let plane = sa.h * sa.w;
        for n in 0..sa.n {
            for c in 0..sa.c {
                let src = sa.index(n, c, 0, 0);
                let dst = out_shape.index(n, c, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&a.data[src..src + plane]);
            }
            for c in 0..sb.c {
                let src = sb.index(n, c, 0, 0);
                let dst = out_shape.index(n, sa.c + c, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&b.data[src..src + plane]);
            }
        }
        Ok(out)
    }

    /// Copy of channels [from, to).
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor> {
        let s = self.shape;
        if from >= to || to > s.c {
            return Err(Error::Shape(format!(
                "slice_channels [{from},{to}) out of range for c={}",
                s.c
            )));
        }
        let out_shape = Shape::new(s.n, to - from, s.h, s.w)?;
        let mut out = Tensor::zeros(out_shape);
        let plane = s.h * s.w;
        for n in 0..s.n {
            for c in from..to {
                let src = s.index(n, c, 0, 0);
                let dst = out_shape.index(n, c - from, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(out)
    }
}

/// Per-pixel integer class labels for a batch, shape (n, h, w).
/// 255 is conventionally the ignore label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new_filled(n: usize, h: usize, w: usize, value: u8) -> LabelMap {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label data length {} != {}x{}x{}",
                data.len(),
                n,
                h,
                w
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn new_filled_values() {
        let t = Tensor::new_filled(shape(1, 1, 2, 2), 0.0);
        assert!(t.iter().all(|v| v == 0.0));

        let t = Tensor::new_filled(shape(1, 3, 1, 1), 10.0);
        assert_eq!(t.data(), &[10.0, 10.0, 10.0]);

        let t = Tensor::new_filled(shape(2, 2, 2, 2), 1.0);
        assert_eq!(t.iter().sum::<f32>(), 16.0);
    }

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(0, 1, 1, 1).is_err());
        assert!(Shape::new(1, 1, 0, 1).is_err());
    }

    #[test]
    fn shape_rejects_overflow() {
        assert!(Shape::new(usize::MAX, 2, 2, 2).is_err());
    }

    #[test]
    fn l2_norm_345() {
        let x = Tensor::from_vec(shape(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let n = x.l2_norm_over_channels(1e-12);
        assert!((n.get(0, 0, 0, 0) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn l2_norm_zero_pixel_hits_eps_floor() {
        let x = Tensor::zeros(shape(1, 3, 2, 2));
        let n = x.l2_norm_over_channels(1e-12);
        for v in n.iter() {
            assert!((v - 1e-12).abs() < 1e-18);
        }
    }

    #[test]
    fn l2_norm_ones() {
        let x = Tensor::new_filled(shape(1, 4, 1, 1), 1.0);
        let n = x.l2_norm_over_channels(1e-12);
        assert!((n.get(0, 0, 0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn spatial_mean_constant_and_small() {
        let t = Tensor::new_filled(shape(1, 1, 3, 3), 7.0);
        assert_eq!(t.reduce_spatial_mean().get(0, 0, 0, 0), 7.0);

        let t = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.reduce_spatial_mean().get(0, 0, 0, 0), 2.5);
    }

    #[test]
    fn broadcast_replicates_and_rejects_non_1x1() {
        let t = Tensor::from_vec(shape(1, 2, 1, 1), vec![5.0, -3.0]).unwrap();
        let b = t.broadcast_spatial(2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(b.get(0, 0, y, x), 5.0);
                assert_eq!(b.get(0, 1, y, x), -3.0);
            }
        }
        // degenerate 1x1 target is the identity
        assert_eq!(t.broadcast_spatial(1, 1).unwrap(), t);
        assert!(b.broadcast_spatial(4, 4).is_err());
    }

    #[test]
    fn concat_channel_counts_and_order() {
        let a = Tensor::new_filled(shape(1, 2, 1, 1), 1.0);
        let b = Tensor::new_filled(shape(1, 3, 1, 1), 2.0);
        let ab = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape().c, 5);
        let ba = Tensor::concat_channels(&b, &a).unwrap();
        assert_ne!(ab, ba);
        // slicing the first block recovers a
        assert_eq!(ab.slice_channels(0, 2).unwrap(), a);
        assert_eq!(ab.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(shape(1, 2, 2, 2));
        let b = Tensor::zeros(shape(1, 2, 3, 3));
        assert!(Tensor::concat_channels(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn mean_broadcast_round_trip(vals in proptest::collection::vec(-10.0f32..10.0, 24)) {
            let t = Tensor::from_vec(shape(2, 3, 2, 2), vals).unwrap();
            let pooled = t.reduce_spatial_mean();
            let back = pooled.broadcast_spatial(2, 2).unwrap().reduce_spatial_mean();
            for (a, b) in pooled.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn norm_dominates_components(vals in proptest::collection::vec(-10.0f32..10.0, 12)) {
            let t = Tensor::from_vec(shape(1, 3, 2, 2), vals).unwrap();
            let n = t.l2_norm_over_channels(1e-12);
            for y in 0..2 {
                for x in 0..2 {
                    let r = n.get(0, 0, y, x);
                    prop_assert!(r >= 1e-12);
                    for c in 0..3 {
                        prop_assert!(r >= t.get(0, c, y, x).abs() * (1.0 - 1e-6));
                    }
                }
            }
        }

        #[test]
        fn concat_slice_recovers_operands(
            va in proptest::collection::vec(-5.0f32..5.0, 8),
            vb in proptest::collection::vec(-5.0f32..5.0, 12),
        ) {
            let a = Tensor::from_vec(shape(1, 2, 2, 2), va).unwrap();
            let b = Tensor::from_vec(shape(1, 3, 2, 2), vb).unwrap();
            let cat = Tensor::concat_channels(&a, &b).unwrap();
            prop_assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
            prop_assert_eq!(cat.slice_channels(2, 5).unwrap(), b);
        }
    }
}
