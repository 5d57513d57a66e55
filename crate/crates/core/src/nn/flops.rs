use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pruning::Mask;

use super::{Layer, ModelState};

/// Inference FLOPs of the dense layers, counting one multiply and one add per
/// weight. Bias, batch-norm and activation costs are not counted, so the
/// speedup depends on the mask alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub dense_flops: u64,
    pub sparse_flops: u64,
    #[serde(skip)]
    pub speedup: Ratio<u64>,
}

impl FlopsReport {
    pub fn speedup_f64(&self) -> f64 {
        *self.speedup.numer() as f64 / *self.speedup.denom() as f64
    }
}

pub fn count_flops(model: &ModelState, mask: &Mask) -> Result<FlopsReport> {
    mask.check_congruent(model)?;
    let mut dense = 0u64;
    let mut sparse = 0u64;
    for layer in &model.layers {
        if let Layer::Dense { in_dim, out_dim, weight, .. } = layer {
            let total = (in_dim * out_dim) as u64;
            let kept = mask.tensor_for(*weight).map_or(total, |t| t.kept() as u64);
            dense += 2 * total;
            sparse += 2 * kept;
        }
    }
    if sparse == 0 {
        return Err(Error::Degenerate("every weight is pruned, sparse FLOPs are zero".into()));
    }
    Ok(FlopsReport { dense_flops: dense, sparse_flops: sparse, speedup: Ratio::new(dense, sparse) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, ArchSpec};

    #[test]
    fn ninety_percent_of_one_layer_is_ten_x() {
        let m = init_model(&ArchSpec::new(vec![100, 100], false).unwrap(), 0).unwrap();
        let mut mask = Mask::full(&m);
        mask.tensors[0].keep.iter_mut().take(9000).for_each(|k| *k = false);
        mask.recount();
        let r = count_flops(&m, &mask).unwrap();
        assert_eq!(r.speedup, Ratio::from_integer(10));
    }

    #[test]
    fn dense_model_has_unit_speedup() {
        let m = init_model(&ArchSpec::new(vec![4, 7, 3], true).unwrap(), 0).unwrap();
        let r = count_flops(&m, &Mask::full(&m)).unwrap();
        assert_eq!(r.speedup, Ratio::from_integer(1));
        assert_eq!(r.dense_flops, r.sparse_flops);
    }

    #[test]
    fn all_pruned_is_degenerate() {
        let m = init_model(&ArchSpec::new(vec![2, 2], false).unwrap(), 0).unwrap();
        let mut mask = Mask::full(&m);
        mask.tensors[0].keep.iter_mut().for_each(|k| *k = false);
        mask.recount();
        assert!(matches!(count_flops(&m, &mask), Err(Error::Degenerate(_))));
    }
}
