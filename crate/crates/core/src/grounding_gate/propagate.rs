//! Seeding per-noun masks at the start frame and carrying them forward.

use serde::Serialize;

use super::mask::{union_mask, BinaryMask};
use super::{DetectionRecord, ScoreTable};
use crate::error::{Error, Result};

/// Produces the mask for `frame` from the mask of the previous frame.
///
/// Implementations must be deterministic; tracks for different nouns may be
/// built in any order.
pub trait MaskPropagator {
    fn propagate(
        &self,
        noun_index: usize,
        noun: &str,
        previous: &BinaryMask,
        frame: usize,
    ) -> std::result::Result<BinaryMask, String>;
}

/// Fallback propagator: every frame repeats the seed mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPropagator;

impl MaskPropagator for IdentityPropagator {
    fn propagate(&self, _: usize, _: &str, previous: &BinaryMask, _: usize) -> std::result::Result<BinaryMask, String> {
        Ok(previous.clone())
    }
}

/// Re-detects instead of tracking: frame `t` takes the winning proposal's mask
/// when the noun clears its threshold there, and an empty mask otherwise.
#[derive(Debug, Clone)]
pub struct DetectionPropagator {
    masks: Vec<Vec<Option<BinaryMask>>>,
}

impl DetectionPropagator {
    pub fn new(detections: &[DetectionRecord], table: &ScoreTable, thresholds: &[f64]) -> Result<Self> {
        if thresholds.len() != table.noun_count() {
            return Err(Error::invalid("threshold count does not match noun count"));
        }
        let mut masks = vec![vec![None; table.frames()]; table.noun_count()];
        for t in 1..=table.frames() {
            for (i, m) in super::best_proposal_masks(detections, table, t).into_iter().enumerate() {
                if table.score(i, t) >= thresholds[i] {
                    masks[i][t - 1] = m;
                }
            }
        }
        Ok(Self { masks })
    }
}

impl MaskPropagator for DetectionPropagator {
    fn propagate(
        &self,
        noun_index: usize,
        _: &str,
        previous: &BinaryMask,
        frame: usize,
    ) -> std::result::Result<BinaryMask, String> {
        let slot = self
            .masks
            .get(noun_index)
            .and_then(|row| row.get(frame - 1))
            .ok_or_else(|| format!("no detections for noun {noun_index} at frame {frame}"))?;
        Ok(slot.clone().unwrap_or_else(|| BinaryMask::empty(previous.width(), previous.height())))
    }
}

/// Masks for one noun from its start frame through the last frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskTrack {
    pub noun: String,
    pub start: usize,
    pub masks: Vec<BinaryMask>,
    /// Set when propagation stopped early; the track then ends at the frame
    /// before the failure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl MaskTrack {
    /// Last frame covered by the track, `start - 1` when empty.
    pub fn end(&self) -> usize {
        self.start + self.masks.len() - 1
    }

    pub fn mask_at(&self, frame: usize) -> Option<&BinaryMask> {
        frame.checked_sub(self.start).and_then(|i| self.masks.get(i))
    }
}

/// Seeds one mask per noun at `t_s` and propagates each forward to frame `T`.
pub fn seed_and_propagate<P: MaskPropagator + ?Sized>(
    table: &ScoreTable,
    t_s: usize,
    seeds: &[BinaryMask],
    propagator: &P,
) -> Result<Vec<MaskTrack>> {
    if seeds.len() != table.noun_count() {
        return Err(Error::invalid(format!("{} seed masks for {} nouns", seeds.len(), table.noun_count())));
    }
    if t_s == 0 || t_s > table.frames() {
        return Err(Error::invalid(format!("start frame {t_s} outside 1..={}", table.frames())));
    }
    let mut tracks = Vec::with_capacity(seeds.len());
    for (i, seed) in seeds.iter().enumerate() {
        let noun = &table.nouns()[i];
        let mut masks = vec![seed.clone()];
        let mut diagnostic = None;
        for t in t_s + 1..=table.frames() {
            let prev = masks.last().expect("track has a seed");
            match propagator.propagate(i, noun, prev, t) {
                Ok(m) if m.same_dims(seed) => masks.push(m),
                Ok(m) => {
                    diagnostic = Some(format!(
                        "frame {t}: propagator returned {}x{} mask, track is {}x{}",
                        m.width(),
                        m.height(),
                        seed.width(),
                        seed.height()
                    ));
                    break;
                }
                Err(e) => {
                    diagnostic = Some(format!("frame {t}: {e}"));
                    break;
                }
            }
        }
        tracks.push(MaskTrack { noun: noun.clone(), start: t_s, masks, diagnostic });
    }
    Ok(tracks)
}

/// Tracks seeded at `t_s` from the winning proposals' masks and carried by a
/// [`DetectionPropagator`], plus the per-frame unions. With no start frame
/// there are no tracks and every union is empty. Nouns without a seed mask
/// start from an empty `width × height` mask.
pub fn track_from_detections(
    detections: &[DetectionRecord],
    table: &ScoreTable,
    thresholds: &[f64],
    t_s: Option<usize>,
    width: usize,
    height: usize,
) -> Result<(Vec<MaskTrack>, Vec<BinaryMask>)> {
    let tracks = match t_s {
        Some(t_s) => {
            let seeds: Vec<BinaryMask> = super::best_proposal_masks(detections, table, t_s)
                .into_iter()
                .map(|m| m.unwrap_or_else(|| BinaryMask::empty(width, height)))
                .collect();
            let propagator = DetectionPropagator::new(detections, table, thresholds)?;
            seed_and_propagate(table, t_s, &seeds, &propagator)?
        }
        None => Vec::new(),
    };
    let unions = frame_union_masks(&tracks, table.frames(), width, height)?;
    Ok((tracks, unions))
}

/// Per-frame union `M_t` over all tracks, for frames `1..=frames`. Frames no
/// track covers get an empty `width × height` mask.
pub fn frame_union_masks(tracks: &[MaskTrack], frames: usize, width: usize, height: usize) -> Result<Vec<BinaryMask>> {
    (1..=frames)
        .map(|t| {
            let present: Vec<BinaryMask> = tracks.iter().filter_map(|tr| tr.mask_at(t)).cloned().collect();
            if present.is_empty() {
                Ok(BinaryMask::empty(width, height))
            } else {
                let u = union_mask(&present)?;
                if u.width() != width || u.height() != height {
                    return Err(Error::invalid(format!(
                        "track masks are {}x{}, expected {width}x{height}",
                        u.width(),
                        u.height()
                    )));
                }
                Ok(u)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::mask::{rle_decode, rle_encode, MaskGrid};
    use super::*;
    use crate::prompt::NounSet;

    struct ShiftRight;

    impl MaskPropagator for ShiftRight {
        fn propagate(&self, _: usize, _: &str, prev: &BinaryMask, _: usize) -> std::result::Result<BinaryMask, String> {
            let g = rle_decode(prev);
            let mut out = MaskGrid::empty(g.width, g.height);
            for y in 0..g.height {
                for x in 1..g.width {
                    out.set(x, y, g.get(x - 1, y));
                }
            }
            Ok(rle_encode(&out))
        }
    }

    struct FailAt(usize);

    impl MaskPropagator for FailAt {
        fn propagate(
            &self,
            _: usize,
            _: &str,
            prev: &BinaryMask,
            frame: usize,
        ) -> std::result::Result<BinaryMask, String> {
            if frame == self.0 {
                Err("tracker lost target".into())
            } else {
                Ok(prev.clone())
            }
        }
    }

    fn table(frames: usize) -> ScoreTable {
        ScoreTable::from_scores(&NounSet::new(["dog"]), frames, vec![0.9; frames]).unwrap()
    }

    #[test]
    fn identity_copies_seed() {
        let mut g = MaskGrid::empty(4, 4);
        g.fill_rect(0, 0, 2, 2);
        let seed = rle_encode(&g);
        let tracks = seed_and_propagate(&table(7), 3, std::slice::from_ref(&seed), &IdentityPropagator).unwrap();
        assert_eq!(tracks[0].masks.len(), 5);
        assert!(tracks[0].masks.iter().all(|m| *m == seed));
        assert_eq!(tracks[0].end(), 7);
    }

    #[test]
    fn empty_seed_stays_empty() {
        let seed = BinaryMask::empty(4, 4);
        let tracks = seed_and_propagate(&table(4), 1, &[seed], &IdentityPropagator).unwrap();
        assert!(tracks[0].masks.iter().all(|m| m.area() == 0));
    }

    #[test]
    fn shifting_propagator_matches_hand_shift() {
        // seed: column 0 of rows 1 and 2 set
        let seed = BinaryMask::from_runs(4, 4, vec![4, 1, 3, 1, 7]).unwrap();
        let tracks = seed_and_propagate(&table(4), 1, &[seed], &ShiftRight).unwrap();
        let m = &tracks[0].masks;
        assert_eq!(m[1].runs(), &[5, 1, 3, 1, 6]);
        assert_eq!(m[2].runs(), &[6, 1, 3, 1, 5]);
        assert_eq!(m[3].runs(), &[7, 1, 3, 1, 4]);
    }

    #[test]
    fn failure_truncates_track() {
        let seed = BinaryMask::empty(2, 2);
        let tracks = seed_and_propagate(&table(6), 2, &[seed], &FailAt(5)).unwrap();
        assert_eq!(tracks[0].end(), 4);
        assert!(tracks[0].diagnostic.as_deref().unwrap().contains("frame 5"));
    }

    #[test]
    fn seed_count_checked() {
        assert!(seed_and_propagate(&table(3), 1, &[], &IdentityPropagator).is_err());
        assert!(seed_and_propagate(&table(3), 4, &[BinaryMask::empty(1, 1)], &IdentityPropagator).is_err());
    }

    #[test]
    fn union_masks_before_start_are_empty() {
        let seed = BinaryMask::from_runs(2, 2, vec![0, 1, 3]).unwrap();
        let tracks = seed_and_propagate(&table(3), 2, std::slice::from_ref(&seed), &IdentityPropagator).unwrap();
        let u = frame_union_masks(&tracks, 3, 2, 2).unwrap();
        assert_eq!(u[0].area(), 0);
        assert_eq!(u[1], seed);
        assert_eq!(u[2], seed);
    }
}
