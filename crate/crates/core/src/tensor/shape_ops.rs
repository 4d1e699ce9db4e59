//! Reshape, permute, concat, slice.

use super::{GradCtx, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        let n_old: usize = old.iter().product();
        let n_new: usize = shape.iter().product();
        assert_eq!(n_old, n_new, "reshape: element count mismatch");
        let v = self
            .value(a)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape on non-contiguous value")
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: GradCtx| {
                vec![ctx
                    .grad
                    .view()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap()
                    .to_owned()]
            })),
        )
    }

    /// Permute axes; the output is materialized in standard layout.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let nd = self.shape(a).len();
        assert_eq!(axes.len(), nd, "permute: wrong axis count");
        let axes_owned = axes.to_vec();
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: GradCtx| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &ax) in axes_owned.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![ctx
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            parents,
            Some(Box::new(move |ctx: GradCtx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let piece = ctx
                        .grad
                        .slice_axis(Axis(axis), Slice::from(start..start + s as isize))
                        .as_standard_layout()
                        .to_owned();
                    out.push(piece);
                    start += s as isize;
                }
                out
            })),
        )
    }

    /// Contiguous slice `[start, stop)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, stop: usize) -> Var {
        let full = self.shape(a)[axis];
        assert!(start < stop && stop <= full, "slice_axis out of range");
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start as isize..stop as isize))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: GradCtx| {
                let mut shape = ctx.parents[0].shape().to_vec();
                shape[axis] = full;
                let mut g = ArrayD::zeros(IxDyn(&shape));
                g.slice_axis_mut(Axis(axis), Slice::from(start as isize..stop as isize))
                    .assign(ctx.grad);
                vec![g]
            })),
        )
    }
}
