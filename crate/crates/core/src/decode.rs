//! Cluster-based decoding: recovering fine resolution by sharing each seed's
//! value with the pixels assigned to it.
//!
//! The hierarchical product of assignment matrices is never materialised;
//! levels are applied one after another, at most nine multiply-adds per pixel
//! and channel per level.

use rayon::prelude::*;

use crate::cluster::AssignmentField;
use crate::error::{invalid, Result};
use crate::grid::{bilinear_upsample, FeatureMap, LabelMap};

const MIN_PAR_PIXELS: usize = 1024;

/// Assignment fields ordered from the coarsest boundary to the finest, plus a
/// trailing bilinear factor.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodePlan {
    fields: Vec<AssignmentField>,
    final_factor: usize,
}

impl DecodePlan {
    pub fn new(fields: Vec<AssignmentField>, final_factor: usize) -> Result<Self> {
        if final_factor == 0 {
            return Err(invalid!("final bilinear factor must be at least 1"));
        }
        check_chain(&fields)?;
        Ok(Self { fields, final_factor })
    }

    pub fn fields(&self) -> &[AssignmentField] {
        &self.fields
    }

    pub fn final_factor(&self) -> usize {
        self.final_factor
    }
}

fn check_chain(fields: &[AssignmentField]) -> Result<()> {
    for (level, pair) in fields.windows(2).enumerate() {
        if pair[0].fine_dims() != pair[1].seed_dims() {
            return Err(invalid!(
                "field {level} decodes to {} but field {} expects seeds of {}",
                pair[0].fine_dims(),
                level + 1,
                pair[1].seed_dims()
            ));
        }
    }
    Ok(())
}

#[inline]
fn decode_pixel(field: &AssignmentField, coarse: &FeatureMap, i: usize, dst: &mut [f64]) {
    dst.fill(0.0);
    for (&j, &w) in field.seeds_of(i).iter().zip(field.weights_of(i)) {
        for (d, s) in dst.iter_mut().zip(coarse.pixel(j as usize)) {
            *d += w * s;
        }
    }
}

fn check_decode(field: &AssignmentField, coarse: &FeatureMap) -> Result<()> {
    if coarse.dims() != field.seed_dims() {
        return Err(invalid!(
            "coarse map is {} but the field's seed grid is {}",
            coarse.dims(),
            field.seed_dims()
        ));
    }
    Ok(())
}

/// One level of cluster decoding: `fine_i = Σ_j w_ij · coarse_j`.
pub fn decode_once(field: &AssignmentField, coarse: &FeatureMap) -> Result<FeatureMap> {
    check_decode(field, coarse)?;
    let fine = field.fine_dims();
    let c = coarse.channels();
    let mut out = FeatureMap::zeros(fine.height, fine.width, c);
    if c == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(c)
        .with_min_len(MIN_PAR_PIXELS)
        .enumerate()
        .for_each(|(i, dst)| decode_pixel(field, coarse, i, dst));
    Ok(out)
}

/// [`decode_once`] that also reports the number of multiply-adds performed.
pub fn decode_once_counted(field: &AssignmentField, coarse: &FeatureMap) -> Result<(FeatureMap, u64)> {
    check_decode(field, coarse)?;
    let fine = field.fine_dims();
    let c = coarse.channels();
    let mut out = FeatureMap::zeros(fine.height, fine.width, c);
    let mut ops = 0u64;
    for i in 0..field.pixel_count() {
        let dst = out.pixel_mut(i);
        for (&j, &w) in field.seeds_of(i).iter().zip(field.weights_of(i)) {
            for (d, s) in dst.iter_mut().zip(coarse.pixel(j as usize)) {
                *d += w * s;
                ops += 1;
            }
        }
    }
    Ok((out, ops))
}

/// Decodes the coarsest map through every field of the plan, then applies the
/// final bilinear factor.
pub fn decode_hierarchy(plan: &DecodePlan, coarsest: &FeatureMap) -> Result<FeatureMap> {
    let mut current = match plan.fields.first() {
        Some(first) => {
            check_decode(first, coarsest)?;
            coarsest.clone()
        }
        None => coarsest.clone(),
    };
    for field in &plan.fields {
        current = decode_once(field, &current)?;
    }
    bilinear_upsample(&current, plan.final_factor)
}

/// Follows per-level argmax winners from each finest pixel down to a seed of
/// the coarsest grid.
///
/// `fields` are ordered coarsest first, as in [`DecodePlan`].
pub fn compose_hard_labels(fields: &[AssignmentField]) -> Result<LabelMap> {
    check_chain(fields)?;
    let Some(finest) = fields.last() else {
        return Err(invalid!("cannot compose an empty list of fields"));
    };
    let winners: Vec<Vec<u32>> = fields.iter().map(argmax_seeds).collect();
    let fine = finest.fine_dims();
    let labels = (0..fine.len())
        .map(|i| {
            let mut idx = i as u32;
            for w in winners.iter().rev() {
                idx = w[idx as usize];
            }
            idx
        })
        .collect();
    LabelMap::new(fine.height, fine.width, labels)
}

/// Winning seed per pixel, ties to the first candidate.
fn argmax_seeds(field: &AssignmentField) -> Vec<u32> {
    (0..field.pixel_count())
        .map(|i| {
            let ws = field.weights_of(i);
            let mut best = 0;
            for (k, &w) in ws.iter().enumerate() {
                if w > ws[best] {
                    best = k;
                }
            }
            field.seeds_of(i)[best]
        })
        .collect()
}
