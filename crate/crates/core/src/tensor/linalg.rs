//! Matrix products.

use super::{Arr, GradCtx, Tape, Var};
use ndarray::{Array2, Array3, ArrayView2, Ix2, Ix3};

pub(crate) fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn dot(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    a.dot(b)
}

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-d inputs");
        assert_eq!(sa[1], sb[0], "matmul: inner dims differ");
        let v = dot(&as2(self.value(a)), &as2(self.value(b))).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: GradCtx| {
                let g = as2(ctx.grad);
                let a = as2(ctx.parents[0]);
                let b = as2(ctx.parents[1]);
                vec![dot(&g, &b.t()).into_dyn(), dot(&a.t(), &g).into_dyn()]
            })),
        )
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm expects 3-d inputs");
        assert_eq!(sa[0], sb[0], "bmm: batch dims differ");
        assert_eq!(sa[2], sb[1], "bmm: inner dims differ");
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Array3::<f64>::zeros((sa[0], sa[1], sb[2]));
        for i in 0..sa[0] {
            out.index_axis_mut(ndarray::Axis(0), i)
                .assign(&av.index_axis(ndarray::Axis(0), i).dot(&bv.index_axis(ndarray::Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(|ctx: GradCtx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let b = ctx.parents[1].view().into_dimensionality::<Ix3>().unwrap();
                let nb = g.shape()[0];
                let mut da = Array3::<f64>::zeros((a.shape()[0], a.shape()[1], a.shape()[2]));
                let mut db = Array3::<f64>::zeros((b.shape()[0], b.shape()[1], b.shape()[2]));
                for i in 0..nb {
                    let gi = g.index_axis(ndarray::Axis(0), i);
                    let ai = a.index_axis(ndarray::Axis(0), i);
                    let bi = b.index_axis(ndarray::Axis(0), i);
                    da.index_axis_mut(ndarray::Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(ndarray::Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }
}
