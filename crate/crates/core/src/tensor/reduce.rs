//! Reductions.

use super::{GradCtx, Tape, Var};
use ndarray::{arr0, ArrayD, Axis, IxDyn};

impl Tape {
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            arr0(s).into_dyn(),
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let g0 = ctx.grad.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(IxDyn(ctx.parents[0].shape()), g0)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the given axes (removed from the output shape).
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let in_shape = self.shape(a).to_vec();
        let mut v = self.value(a).clone();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        let kept = sorted.clone();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: GradCtx| {
                // Re-insert the reduced axes as size-1 dims, then broadcast.
                let mut with_ones = ctx.grad.clone();
                for &ax in &kept {
                    with_ones = with_ones.insert_axis(Axis(ax));
                }
                let g = with_ones
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axes grad broadcast")
                    .to_owned();
                vec![g]
            })),
        )
    }

    /// Mean over the given axes (removed from the output shape).
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / count as f64)
    }

    /// Per-sample mean squared error over all non-batch axes:
    /// `[B, ...] x [B, ...] -> [B]`.
    pub fn mse_per_sample(&mut self, a: Var, b: Var) -> Var {
        let nd = self.shape(a).len();
        let diff = self.sub(a, b);
        let sq = self.mul(diff, diff);
        let axes: Vec<usize> = (1..nd).collect();
        self.mean_axes(sq, &axes)
    }
}
