use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::metric::{PlaceRecord, Thresholds};

/// Indices into the record list: anchor, positives, negatives and the extra
/// cloud that is negative to all of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub extra: usize,
}

impl TrainingTuple {
    /// Every index in role order: anchor, positives, negatives, extra.
    pub fn members(&self) -> Vec<usize> {
        let mut v = vec![self.anchor];
        v.extend(&self.positives);
        v.extend(&self.negatives);
        v.push(self.extra);
        v
    }
}

fn pick(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Draw a tuple for `records[anchor]`.
///
/// Positives are sampled uniformly from the anchor's positives. The extra
/// cloud is drawn uniformly from keyframes of other rooms that still leave
/// enough negatives outside their own room; negatives are then sampled
/// uniformly from the anchor's negatives outside the extra cloud's room, so
/// the extra cloud's room differs from every room in the tuple.
pub fn mine_tuple(
    anchor: usize,
    records: &[PlaceRecord],
    thresholds: &Thresholds,
    positives: usize,
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<TrainingTuple> {
    let a = records
        .get(anchor)
        .ok_or_else(|| Error::Index(format!("anchor {anchor} outside {} records", records.len())))?;
    let fail = |message: String| Error::Mining { anchor: a.id, message };
    let pos_pool: Vec<usize> = (0..records.len())
        .filter(|&i| i != anchor && thresholds.is_positive(a, &records[i]))
        .collect();
    if pos_pool.len() < positives {
        return Err(fail(format!("{} positives available, {positives} needed", pos_pool.len())));
    }
    let neg_pool: Vec<usize> = (0..records.len())
        .filter(|&i| thresholds.is_negative(a, &records[i]))
        .collect();
    let usable = |room: &str| neg_pool.iter().filter(|&&i| records[i].room != room).count() >= negatives;
    let extra_pool: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].room != a.room && usable(&records[i].room))
        .collect();
    if extra_pool.is_empty() {
        return Err(fail(format!(
            "no keyframe of another room leaves {negatives} negatives outside its own room ({} negatives in total)",
            neg_pool.len()
        )));
    }
    let chosen_pos = pick(&pos_pool, positives, rng);
    let extra = extra_pool[rng.random_range(0..extra_pool.len())];
    let eligible: Vec<usize> = neg_pool
        .iter()
        .copied()
        .filter(|&i| records[i].room != records[extra].room)
        .collect();
    let chosen_neg = pick(&eligible, negatives, rng);
    Ok(TrainingTuple {
        anchor,
        positives: chosen_pos,
        negatives: chosen_neg,
        extra,
    })
}
