//! Block-average downsampling for multi-resolution registration.

use crate::error::{Error, Result};
use crate::grid::{GridDomain, ScalarVolume};
use crate::par;

/// Grid of a `factor`-times coarser volume: one voxel per (possibly partial)
/// block, centred on the block.
pub fn coarse_domain(d: &GridDomain, factor: usize) -> GridDomain {
    let f = factor as f64;
    GridDomain {
        dims: d.dims.map(|n| n.div_ceil(factor)),
        spacing: d.spacing.map(|h| h * f),
        origin: std::array::from_fn(|a| d.origin[a] + 0.5 * (f - 1.0) * d.spacing[a]),
    }
}

/// Averages non-overlapping `factor³` blocks. Spacing grows by `factor`; the
/// new origin is the centre of the first block. Trailing partial blocks
/// average the voxels they contain.
pub fn downsample(vol: &ScalarVolume, factor: usize) -> Result<ScalarVolume> {
    let d = vol.domain;
    if factor == 0 {
        return Err(Error::Invalid("downsample factor must be at least 1".into()));
    }
    if d.dims.iter().any(|&n| factor > n) {
        return Err(Error::Invalid(format!(
            "downsample factor {factor} exceeds grid dims {:?}",
            d.dims
        )));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let cd = coarse_domain(&d, factor);
    let data = par::map(cd.len(), |cidx| {
        let [ci, cj, ck] = cd.coords(cidx);
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in ck * factor..((ck + 1) * factor).min(d.dims[2]) {
            for j in cj * factor..((cj + 1) * factor).min(d.dims[1]) {
                for i in ci * factor..((ci + 1) * factor).min(d.dims[0]) {
                    acc += vol.data[d.index(i, j, k)];
                    count += 1;
                }
            }
        }
        acc / count as f64
    });
    Ok(ScalarVolume {
        domain: cd,
        data,
        background: vol.background,
    })
}

/// Downsamples a binary mask and re-binarises at 0.5.
pub fn downsample_mask(mask: &ScalarVolume, factor: usize) -> Result<ScalarVolume> {
    mask.ensure_binary("downsample_mask input")?;
    let coarse = downsample(mask, factor)?;
    Ok(coarse.map_values(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Replicates every voxel of `coarse` into a `factor³` block on `fine`.
pub fn upsample_replicate(coarse: &ScalarVolume, fine: GridDomain, factor: usize) -> ScalarVolume {
    let cd = coarse.domain;
    let data = par::map(fine.len(), |idx| {
        let [i, j, k] = fine.coords(idx);
        coarse.data[cd.index(i / factor, j / factor, k / factor)]
    });
    ScalarVolume {
        domain: fine,
        data,
        background: coarse.background,
    }
}
