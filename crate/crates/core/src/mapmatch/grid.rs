use crate::geo::{LocalPoint, Segment};

/// Uniform grid over segment bounding boxes.
///
/// Each segment is registered in every cell its bounding box touches, so a
/// rectangular query returns a superset of the segments that reach into it.
#[derive(Debug, Clone)]
pub struct SegmentGrid {
    cell_size: f64,
    origin: LocalPoint,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
}

impl SegmentGrid {
    pub fn build(segments: &[Segment], cell_size: f64) -> Self {
        let cell_size = if cell_size > 0.0 { cell_size } else { 500.0 };
        if segments.is_empty() {
            return Self {
                cell_size,
                origin: LocalPoint::default(),
                cols: 0,
                rows: 0,
                cells: Vec::new(),
            };
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in segments {
            min_x = min_x.min(s.a.x).min(s.b.x);
            min_y = min_y.min(s.a.y).min(s.b.y);
            max_x = max_x.max(s.a.x).max(s.b.x);
            max_y = max_y.max(s.a.y).max(s.b.y);
        }
        let cols = ((max_x - min_x) / cell_size).floor() as usize + 1;
        let rows = ((max_y - min_y) / cell_size).floor() as usize + 1;
        let mut grid = Self {
            cell_size,
            origin: LocalPoint::new(min_x, min_y),
            cols,
            rows,
            cells: vec![Vec::new(); cols * rows],
        };
        for (id, s) in segments.iter().enumerate() {
            let (c0, r0) = grid.cell_of(s.a.x.min(s.b.x), s.a.y.min(s.b.y));
            let (c1, r1) = grid.cell_of(s.a.x.max(s.b.x), s.a.y.max(s.b.y));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    grid.cells[r * cols + c].push(id);
                }
            }
        }
        grid
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x - self.origin.x) / self.cell_size).floor();
        let r = ((y - self.origin.y) / self.cell_size).floor();
        (
            c.clamp(0.0, (self.cols - 1) as f64) as usize,
            r.clamp(0.0, (self.rows - 1) as f64) as usize,
        )
    }

    /// Segment ids registered in cells overlapping the square of half-width
    /// `half` around `p`, sorted and deduplicated.
    pub fn query_box(&self, p: LocalPoint, half: f64) -> Vec<usize> {
        if self.cells.is_empty() {
            return Vec::new();
        }
        let max_x = self.origin.x + self.cols as f64 * self.cell_size;
        let max_y = self.origin.y + self.rows as f64 * self.cell_size;
        if p.x + half < self.origin.x || p.y + half < self.origin.y || p.x - half > max_x || p.y - half > max_y {
            return Vec::new();
        }
        let (c0, r0) = self.cell_of(p.x - half, p.y - half);
        let (c1, r1) = self.cell_of(p.x + half, p.y + half);
        let mut ids = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                ids.extend_from_slice(&self.cells[r * self.cols + c]);
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
