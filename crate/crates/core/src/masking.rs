//! Block-sharing cost-map masks, their resolution pyramids, and the copy
//! oracle used to quantify how much masked content leaks between neighbors.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::costvol::CostVolume;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Number of pyramid levels; the base mask lives at `1/2^(LEVELS−1)` resolution.
pub const LEVELS: usize = 4;
/// Cost-map extent per base-mask cell.
pub const BASE_CELL: usize = 1 << (LEVELS - 1);

/// Axis-aligned rectangle of source pixels, `[row, row+height) × [col, col+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Tiling of the source grid into rectangular blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    pub height: usize,
    pub width: usize,
    /// Row-major block id of every source pixel.
    pub block_id: Vec<usize>,
    pub blocks: Vec<Rect>,
    pub side_range: (usize, usize),
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn id_at(&self, row: usize, col: usize) -> usize {
        self.block_id[row * self.width + col]
    }

    fn from_rects(height: usize, width: usize, blocks: Vec<Rect>, side_range: (usize, usize)) -> Self {
        let mut block_id = vec![usize::MAX; height * width];
        for (id, r) in blocks.iter().enumerate() {
            for y in r.row..r.row + r.height {
                for x in r.col..r.col + r.width {
                    block_id[y * width + x] = id;
                }
            }
        }
        BlockPartition {
            height,
            width,
            block_id,
            blocks,
            side_range,
        }
    }
}

/// Default block side range in source-grid units: `[32, 120]` when the grid is
/// at least 32 cells per side, otherwise `[min_side/4, max_side]`.
pub fn default_side_range(height: usize, width: usize) -> (usize, usize) {
    if height >= 32 && width >= 32 {
        (32, 120)
    } else {
        ((height.min(width) / 4).max(1), height.max(width))
    }
}

fn cover<R: Rng>(extent: usize, side_range: (usize, usize), rng: &mut R) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < extent {
        let len = rng.random_range(side_range.0..=side_range.1).min(extent - start);
        spans.push((start, len));
        start += len;
    }
    spans
}

/// Greedy tiling: row bands of random height, each cut into blocks of random width.
pub fn partition_blocks<R: Rng>(
    height: usize,
    width: usize,
    side_range: (usize, usize),
    rng: &mut R,
) -> Result<BlockPartition> {
    if side_range.0 == 0 || side_range.0 > side_range.1 {
        return Err(Error::config(format!(
            "block side range must satisfy 1 ≤ min ≤ max, got {side_range:?}"
        )));
    }
    let mut blocks = Vec::new();
    for (row, band) in cover(height, side_range, rng) {
        for (col, len) in cover(width, side_range, rng) {
            blocks.push(Rect {
                row,
                col,
                height: band,
                width: len,
            });
        }
    }
    Ok(BlockPartition::from_rects(height, width, blocks, side_range))
}

/// One block per source pixel: the per-pixel random-masking baseline.
pub fn singleton_partition(height: usize, width: usize) -> BlockPartition {
    let blocks = (0..height * width)
        .map(|i| Rect {
            row: i / width,
            col: i % width,
            height: 1,
            width: 1,
        })
        .collect();
    BlockPartition::from_rects(height, width, blocks, (1, 1))
}

/// Binary grid; `true` marks a visible cell, `false` a masked one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub visible: Vec<bool>,
}

impl MaskGrid {
    pub fn all_visible(height: usize, width: usize) -> Self {
        MaskGrid {
            height,
            width,
            visible: vec![true; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.width + col]
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|&&v| !v).count()
    }

    /// Row-major indices of visible cells.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }
}

/// Number of cells masked at a given ratio: `round(ratio · cells)`.
pub fn masked_cells(cells: usize, ratio: f64) -> usize {
    ((ratio * cells as f64).round() as usize).min(cells)
}

/// Masks exactly `round(ratio·h·w)` cells chosen uniformly without replacement.
pub fn sample_base_mask<R: Rng>(height: usize, width: usize, ratio: f64, rng: &mut R) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    let cells = height * width;
    let mut mask = MaskGrid::all_visible(height, width);
    for i in sample(rng, cells, masked_cells(cells, ratio)) {
        mask.visible[i] = false;
    }
    Ok(mask)
}

/// Nearest-neighbor pyramid: `levels[i]` has shape `(Hc/2^i) × (Wc/2^i)`,
/// `levels[LEVELS−1]` is the base mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPyramid {
    pub levels: Vec<MaskGrid>,
}

impl MaskPyramid {
    pub fn base(&self) -> &MaskGrid {
        &self.levels[LEVELS - 1]
    }

    pub fn full(&self) -> &MaskGrid {
        &self.levels[0]
    }
}

/// Upsamples a base mask 2× three times to cover an `hc×wc` cost map.
pub fn build_pyramid(base: &MaskGrid, hc: usize, wc: usize) -> Result<MaskPyramid> {
    if hc % BASE_CELL != 0 || wc % BASE_CELL != 0 {
        return Err(Error::shape(format!(
            "cost map {hc}×{wc} is not divisible by {BASE_CELL}"
        )));
    }
    if base.height != hc / BASE_CELL || base.width != wc / BASE_CELL {
        return Err(Error::shape(format!(
            "base mask {}×{} does not match cost map {hc}×{wc}",
            base.height, base.width
        )));
    }
    let levels = (0..LEVELS)
        .map(|i| {
            let f = 1 << (LEVELS - 1 - i);
            let (h, w) = (hc >> i, wc >> i);
            let visible = (0..h * w).map(|k| base.get(k / w / f, k % w / f)).collect();
            MaskGrid {
                height: h,
                width: w,
                visible,
            }
        })
        .collect();
    Ok(MaskPyramid { levels })
}

/// Per-source-pixel mask pyramids, shared within partition blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramidSet {
    pub partition: BlockPartition,
    /// One pyramid per block.
    pub pyramids: Vec<MaskPyramid>,
    pub ratio: f64,
    pub map_dims: (usize, usize),
}

impl MaskPyramidSet {
    /// Pyramid of the source pixel with row-major index `pixel`.
    pub fn for_pixel(&self, pixel: usize) -> &MaskPyramid {
        &self.pyramids[self.partition.block_id[pixel]]
    }

    pub fn num_pixels(&self) -> usize {
        self.partition.block_id.len()
    }
}

/// Samples one base mask per block and expands it to a pyramid.
pub fn generate_block_sharing_masks<R: Rng>(
    partition: &BlockPartition,
    hc: usize,
    wc: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPyramidSet> {
    if hc % BASE_CELL != 0 || wc % BASE_CELL != 0 {
        return Err(Error::shape(format!(
            "cost map {hc}×{wc} is not divisible by {BASE_CELL}"
        )));
    }
    let pyramids = (0..partition.num_blocks())
        .map(|_| {
            let base = sample_base_mask(hc / BASE_CELL, wc / BASE_CELL, ratio, rng)?;
            build_pyramid(&base, hc, wc)
        })
        .collect::<Result<_>>()?;
    Ok(MaskPyramidSet {
        partition: partition.clone(),
        pyramids,
        ratio,
        map_dims: (hc, wc),
    })
}

/// How source pixels share masks during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Varied-size blocks share one mask.
    Block,
    /// Every source pixel draws its own mask.
    Random,
    /// No masking (the finetuning path).
    None,
}

impl MaskStrategy {
    /// Draws a fresh partition and masks; `None` for the unmasked strategy.
    pub fn generate<R: Rng>(
        self,
        source: (usize, usize),
        map: (usize, usize),
        ratio: f64,
        side_range: (usize, usize),
        rng: &mut R,
    ) -> Result<Option<MaskPyramidSet>> {
        let partition = match self {
            MaskStrategy::None => return Ok(None),
            MaskStrategy::Block => partition_blocks(source.0, source.1, side_range, rng)?,
            MaskStrategy::Random => singleton_partition(source.0, source.1),
        };
        generate_block_sharing_masks(&partition, map.0, map.1, ratio, rng).map(Some)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Block => "block",
            MaskStrategy::Random => "random",
            MaskStrategy::None => "none",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "block" => Ok(MaskStrategy::Block),
            "random" => Ok(MaskStrategy::Random),
            "none" => Ok(MaskStrategy::None),
            _ => Err(format!("expected block, random or none, got {s:?}")),
        }
    }
}

/// Source pixels ordered by Euclidean distance from each pixel, ties broken by
/// row-major index; the pixel itself is excluded.
fn neighbor_order(h: usize, w: usize) -> Vec<Vec<u32>> {
    (0..h * w)
        .map(|p| {
            let (py, px) = ((p / w) as i64, (p % w) as i64);
            let mut others: Vec<(i64, u32)> = (0..h * w)
                .filter(|&q| q != p)
                .map(|q| {
                    let (dy, dx) = ((q / w) as i64 - py, (q % w) as i64 - px);
                    (dy * dy + dx * dx, q as u32)
                })
                .collect();
            others.sort_unstable();
            others.into_iter().map(|(_, q)| q).collect()
        })
        .collect()
}

/// Mean squared error of reconstructing every masked full-resolution cost by
/// copying it from the nearest source pixel that sees that cell (0 when no
/// pixel does). Returns 0 when nothing is masked.
pub fn leakage_oracle_mse<S: Real>(cv: &CostVolume<S>, masks: &MaskPyramidSet) -> Result<f64> {
    let (hs, ws) = cv.source_dims();
    let (hc, wc) = cv.map_dims();
    if masks.num_pixels() != hs * ws || masks.map_dims != (hc, wc) {
        return Err(Error::shape(format!(
            "masks for {} pixels over {:?} do not match cost volume {:?}",
            masks.num_pixels(),
            masks.map_dims,
            cv.values().shape()
        )));
    }
    let order = neighbor_order(hs, ws);
    let (h3, w3) = (hc / BASE_CELL, wc / BASE_CELL);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..hs * ws {
        let own = masks.for_pixel(p).base();
        let map = cv.map(p / ws, p % ws);
        for cell in 0..h3 * w3 {
            if own.visible[cell] {
                continue;
            }
            let donor = order[p]
                .iter()
                .map(|&q| q as usize)
                .find(|&q| masks.for_pixel(q).base().visible[cell]);
            let donor_map = donor.map(|q| cv.map(q / ws, q % ws));
            let (cy, cx) = (cell / w3, cell % w3);
            for y in cy * BASE_CELL..(cy + 1) * BASE_CELL {
                for x in cx * BASE_CELL..(cx + 1) * BASE_CELL {
                    let i = y * wc + x;
                    let pred = donor_map.map_or(0.0, |m| m[i].f64());
                    let err = map[i].f64() - pred;
                    total += err * err;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
