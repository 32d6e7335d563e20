//! Index-plan gather: the one primitive behind window partitioning, token/map
//! layout changes, neighborhood extraction and patch regrouping. Plans are
//! precomputed once per (shape, config) and shared across forward passes; the
//! backward pass is the matching scatter-add.

use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marks an out-of-source slot; gathers read it as 0 and scatter nothing back.
pub const GATHER_PAD: u32 = u32::MAX;

pub struct GatherPlan {
    pub out_shape: Vec<usize>,
    pub src_numel: usize,
    pub idx: Vec<u32>,
}

impl GatherPlan {
    pub fn new(out_shape: Vec<usize>, src_numel: usize, idx: Vec<u32>) -> Result<Self> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::dim(
                "gather_plan",
                format!("out shape {:?} wants {} indices, got {}", out_shape, numel, idx.len()),
            ));
        }
        if src_numel > GATHER_PAD as usize {
            return Err(Error::Parameter("gather source too large for u32 indices".into()));
        }
        for &i in &idx {
            if i != GATHER_PAD && i as usize >= src_numel {
                return Err(Error::dim(
                    "gather_plan",
                    format!("index {} out of source range {}", i, src_numel),
                ));
            }
        }
        Ok(GatherPlan { out_shape, src_numel, idx })
    }

    /// Plan mapping each output position to a source position via a closure
    /// returning `Some(flat_src)` or `None` for padded slots.
    pub fn build(
        out_shape: &[usize],
        src_numel: usize,
        mut f: impl FnMut(usize) -> Option<usize>,
    ) -> Result<Self> {
        let numel: usize = out_shape.iter().product();
        let idx = (0..numel)
            .map(|j| match f(j) {
                Some(i) => i as u32,
                None => GATHER_PAD,
            })
            .collect();
        GatherPlan::new(out_shape.to_vec(), src_numel, idx)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn gather(&mut self, x: Var, plan: Arc<GatherPlan>) -> Result<Var> {
        if self.value(x).numel() != plan.src_numel {
            return Err(Error::dim(
                "gather",
                format!("plan expects {} source elements, got {}", plan.src_numel, self.value(x).numel()),
            ));
        }
        let src = self.value(x).data();
        let out: Vec<S> = plan
            .idx
            .iter()
            .map(|&i| if i == GATHER_PAD { S::ZERO } else { src[i as usize] })
            .collect();
        let value = Tensor::new(&plan.out_shape, out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for (&i, &gi) in plan.idx.iter().zip(g) {
                            if i != GATHER_PAD {
                                buf[i as usize] += gi;
                            }
                        }
                    }
                }) as _
            }),
        )
    }
}
