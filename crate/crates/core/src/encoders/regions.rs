//! Landmark-anchored AU windows over the ViT patch grid.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::autograd::{Graph, Var};
use crate::data::{AuId, Landmarks, N_LANDMARKS};

/// Where one AU sits: the mean of some landmarks, shifted by an offset
/// measured in patch units (`[dx, dy]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuAnchor {
    pub landmarks: Vec<usize>,
    #[serde(default)]
    pub offset: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuLandmarkMap(pub BTreeMap<AuId, AuAnchor>);

impl Default for AuLandmarkMap {
    /// Brows drive AU1/2/4, eye and cheek drive AU6/7, nose-adjacent upper
    /// lip drives AU10, mouth corners AU12/15, lips AU23/24/25, jaw AU26.
    fn default() -> Self {
        let table: [(u8, &[usize], [f64; 2]); 12] = [
            (1, &[20, 21, 22, 23], [0.0, -0.5]),
            (2, &[17, 18], [0.0, -0.5]),
            (4, &[21, 22, 27], [0.0, 0.0]),
            (6, &[36, 39, 48], [0.0, 0.0]),
            (7, &[37, 38, 40, 41], [0.0, 0.0]),
            (10, &[33, 51], [0.0, 0.0]),
            (12, &[48], [0.0, 0.0]),
            (15, &[54], [0.0, 0.0]),
            (23, &[50, 52, 56, 58], [0.0, 0.0]),
            (24, &[51, 57], [0.0, 0.0]),
            (25, &[62, 66], [0.0, 0.0]),
            (26, &[57, 8], [0.0, 0.0]),
        ];
        let map = table
            .iter()
            .map(|&(n, lm, offset)| {
                (
                    AuId::from_number(n).expect("table lists tracked AUs"),
                    AuAnchor {
                        landmarks: lm.to_vec(),
                        offset,
                    },
                )
            })
            .collect();
        Self(map)
    }
}

impl AuLandmarkMap {
    /// # Errors
    /// [`EncoderError::BadAuMap`] if an AU is missing, has no landmarks, or
    /// references an index outside the 68-point layout.
    pub fn validate(&self) -> Result<(), EncoderError> {
        for au in AuId::all() {
            let anchor = self.0.get(&au).ok_or(EncoderError::BadAuMap(au))?;
            if anchor.landmarks.is_empty() || anchor.landmarks.iter().any(|&i| i >= N_LANDMARKS) {
                return Err(EncoderError::BadAuMap(au));
            }
        }
        Ok(())
    }

    /// Mean landmark position of an AU in pixels (offset not applied).
    pub fn anchor_pixel(&self, au: AuId, landmarks: &Landmarks) -> Option<[f64; 2]> {
        let anchor = self.0.get(&au)?;
        let pts = landmarks.points();
        let n = anchor.landmarks.len() as f64;
        let (mut x, mut y) = (0.0, 0.0);
        for &i in &anchor.landmarks {
            let p = pts.get(i)?;
            x += p[0];
            y += p[1];
        }
        Some([x / n, y / n])
    }
}

/// Patch-grid cell `(row, col)` of each AU center, in table order.
pub fn region_centers(
    landmarks: &Landmarks,
    map: &AuLandmarkMap,
    patch_size: usize,
    grid: (usize, usize),
) -> Result<Vec<(usize, usize)>, EncoderError> {
    map.validate()?;
    let p = patch_size as f64;
    AuId::all()
        .map(|au| {
            let [x, y] = map
                .anchor_pixel(au, landmarks)
                .ok_or(EncoderError::BadAuMap(au))?;
            let off = map.0[&au].offset;
            let cx = libm::floor(x / p + off[0]);
            let cy = libm::floor(y / p + off[1]);
            Ok((clamp_cell(cy, grid.0), clamp_cell(cx, grid.1)))
        })
        .collect()
}

fn clamp_cell(v: f64, n: usize) -> usize {
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}

/// Token rows (1-based past the CLS row) of the `k x k` window around a cell,
/// shifted to stay inside the grid.
pub fn window_rows(center: (usize, usize), k: usize, grid: (usize, usize)) -> Vec<usize> {
    let (gh, gw) = grid;
    let start = |c: usize, n: usize| c.saturating_sub(k / 2).min(n - k);
    let (sy, sx) = (start(center.0, gh), start(center.1, gw));
    let mut rows = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            rows.push(1 + (sy + dy) * gw + (sx + dx));
        }
    }
    rows
}

/// Per-AU windows of patch tokens, each `[k², D]`, in table order.
#[derive(Clone, Debug)]
pub struct AuRegionSet {
    pub regions: Vec<Var>,
    pub centers: Vec<(usize, usize)>,
    pub k: usize,
}

/// Copies each AU's window out of a feature map.
pub fn extract_au_regions(
    g: &mut Graph<'_>,
    feature_map: &super::VisualFeatureMap,
    landmarks: &Landmarks,
    map: &AuLandmarkMap,
    k: usize,
) -> Result<AuRegionSet, EncoderError> {
    let grid = feature_map.grid;
    if k == 0 || k > grid.0 || k > grid.1 {
        return Err(EncoderError::BadRegionSize { k, grid });
    }
    let centers = region_centers(landmarks, map, feature_map.patch_size, grid)?;
    let regions = centers
        .iter()
        .map(|&c| g.select_rows(feature_map.tokens, &window_rows(c, k, grid)))
        .collect();
    Ok(AuRegionSet {
        regions,
        centers,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture::canonical_landmarks;
    use alloc::vec;

    #[test]
    fn default_map_is_complete() {
        AuLandmarkMap::default().validate().unwrap();
    }

    #[test]
    fn missing_au_is_rejected() {
        let mut m = AuLandmarkMap::default();
        let au4 = AuId::from_number(4).unwrap();
        m.0.remove(&au4);
        assert_eq!(m.validate(), Err(EncoderError::BadAuMap(au4)));
    }

    #[test]
    fn top_left_window_is_clamped() {
        let rows = window_rows((0, 0), 3, (4, 4));
        assert_eq!(rows, vec![1, 2, 3, 5, 6, 7, 9, 10, 11]);
        let rows = window_rows((3, 3), 3, (4, 4));
        assert_eq!(rows, vec![6, 7, 8, 10, 11, 12, 14, 15, 16]);
    }

    #[test]
    fn mouth_aus_fall_in_lower_third() {
        // 224 px / 16 px patches = 14x14 grid; lower third is rows >= 10.
        for (size, patch) in [(224usize, 16usize), (32, 8)] {
            let g = size / patch;
            let lm = canonical_landmarks(size);
            let centers = region_centers(&lm, &AuLandmarkMap::default(), patch, (g, g)).unwrap();
            for n in [25u8, 26] {
                let (row, _) = centers[AuId::from_number(n).unwrap().index()];
                assert!(3 * row >= 2 * g, "AU{n} at row {row} of {g} (size {size})");
            }
        }
    }

    #[test]
    fn one_patch_shift_moves_centers_by_one_cell() {
        let lm = canonical_landmarks(224);
        let map = AuLandmarkMap::default();
        let base = region_centers(&lm, &map, 16, (14, 14)).unwrap();
        let shifted = region_centers(&lm.translated(16.0, 16.0), &map, 16, (14, 14)).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            if a.0 < 13 && a.1 < 13 {
                assert_eq!((a.0 + 1, a.1 + 1), *b);
            }
        }
    }
}
