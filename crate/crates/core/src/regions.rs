//! Grid-derived candidate regions.
//!
//! The image is divided into `C×C` cells and every axis-aligned rectangle of
//! whole cells is a candidate, except the full grid itself, which enters the
//! model separately as the whole-image stream.

use crate::error::{Error, Result};

/// Inclusive cell rectangle within a `C×C` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionSpec {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl RegionSpec {
    pub fn rows(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn cols(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }
}

/// Continuous half-open box in feature-map pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: width as f64,
            y1: height as f64,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    cells_per_side: usize,
    regions: Vec<RegionSpec>,
}

impl RegionSet {
    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    /// Number of cell regions `|R|`, excluding the whole image.
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Boxes for every region followed by the whole-image box.
    pub fn boxes(&self, feat_h: usize, feat_w: usize) -> Result<Vec<Box>> {
        let mut out = self
            .regions
            .iter()
            .map(|r| region_to_box(r, self.cells_per_side, feat_h, feat_w))
            .collect::<Result<Vec<_>>>()?;
        out.push(Box::full(feat_h, feat_w));
        Ok(out)
    }
}

/// All cell rectangles of a `C×C` grid except the full grid, ordered by
/// `(row0, col0, row1, col1)`.
pub fn enumerate_regions(cells_per_side: usize) -> Result<RegionSet> {
    enumerate_regions_capped(cells_per_side, None)
}

/// Like [`enumerate_regions`], keeping only rectangles at most `max_extent`
/// cells tall and wide.
pub fn enumerate_regions_capped(cells_per_side: usize, max_extent: Option<usize>) -> Result<RegionSet> {
    let c = cells_per_side;
    if c < 1 {
        return Err(Error::invalid("cells_per_side must be at least 1"));
    }
    if max_extent == Some(0) {
        return Err(Error::invalid("max_cells_per_side must be at least 1"));
    }
    let cap = max_extent.unwrap_or(c);
    let mut regions = Vec::new();
    for row0 in 0..c {
        for col0 in 0..c {
            for row1 in row0..c.min(row0 + cap) {
                for col1 in col0..c.min(col0 + cap) {
                    let full = row0 == 0 && col0 == 0 && row1 == c - 1 && col1 == c - 1;
                    if !full {
                        regions.push(RegionSpec { row0, col0, row1, col1 });
                    }
                }
            }
        }
    }
    Ok(RegionSet {
        cells_per_side: c,
        regions,
    })
}

/// Closed form `(C(C+1)/2)² − 1` of the uncapped enumeration.
pub fn region_count(cells_per_side: usize) -> Result<usize> {
    if cells_per_side < 1 {
        return Err(Error::invalid("cells_per_side must be at least 1"));
    }
    let spans = cells_per_side * (cells_per_side + 1) / 2;
    Ok(spans * spans - 1)
}

pub fn region_to_box(r: &RegionSpec, cells_per_side: usize, feat_h: usize, feat_w: usize) -> Result<Box> {
    let c = cells_per_side;
    if feat_h < c || feat_w < c {
        return Err(Error::invalid(format!(
            "feature map {feat_h}x{feat_w} is smaller than the {c}x{c} grid"
        )));
    }
    if r.row0 > r.row1 || r.col0 > r.col1 || r.row1 >= c || r.col1 >= c {
        return Err(Error::invalid(format!("region {r:?} outside a {c}x{c} grid")));
    }
    let (cw, ch) = (feat_w as f64 / c as f64, feat_h as f64 / c as f64);
    Ok(Box {
        x0: r.col0 as f64 * cw,
        y0: r.row0 as f64 * ch,
        x1: (r.col1 + 1) as f64 * cw,
        y1: (r.row1 + 1) as f64 * ch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(row0: usize, col0: usize, row1: usize, col1: usize) -> RegionSpec {
        RegionSpec { row0, col0, row1, col1 }
    }

    #[test]
    fn counts() {
        assert_eq!(enumerate_regions(2).unwrap().len(), 8);
        assert_eq!(enumerate_regions(3).unwrap().len(), 35);
        assert_eq!(enumerate_regions(1).unwrap().len(), 0);
        assert_eq!(enumerate_regions(4).unwrap().len(), 99);
        assert_eq!(region_count(5).unwrap(), 224);
        assert!(enumerate_regions(0).is_err());
        assert!(region_count(0).is_err());
    }

    #[test]
    fn canonical_order_has_no_duplicates() {
        let set = enumerate_regions(4).unwrap();
        let mut sorted = set.regions().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, set.regions());
    }

    #[test]
    fn capped_extent_on_4x4_gives_49_regions() {
        let set = enumerate_regions_capped(4, Some(2)).unwrap();
        assert_eq!(set.len(), 49);
        assert!(set.regions().iter().all(|r| r.rows() <= 2 && r.cols() <= 2));
    }

    #[test]
    fn box_examples() {
        assert_eq!(
            region_to_box(&spec(0, 0, 0, 0), 3, 12, 12).unwrap(),
            Box { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 }
        );
        assert_eq!(
            region_to_box(&spec(0, 0, 2, 1), 3, 12, 12).unwrap(),
            Box { x0: 0.0, y0: 0.0, x1: 8.0, y1: 12.0 }
        );
        assert_eq!(
            region_to_box(&spec(1, 1, 1, 1), 2, 7, 7).unwrap(),
            Box { x0: 3.5, y0: 3.5, x1: 7.0, y1: 7.0 }
        );
        assert!(region_to_box(&spec(0, 0, 0, 0), 3, 2, 12).is_err());
    }

    #[test]
    fn whole_image_box_is_appended() {
        let boxes = enumerate_regions(2).unwrap().boxes(6, 6).unwrap();
        assert_eq!(boxes.len(), 9);
        assert_eq!(*boxes.last().unwrap(), Box::full(6, 6));
    }
}
