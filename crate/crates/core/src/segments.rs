//! Connected same-class segments of a label map (4-connectivity).

use crate::image::LabelMap;

/// Component id per pixel plus the pixel count of every component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub ids: Vec<usize>,
    pub areas: Vec<usize>,
}

impl Segments {
    pub fn count(&self) -> usize {
        self.areas.len()
    }
}

/// Labels components by flood fill in raster order, so ids are assigned in
/// the order their first pixel is met.
pub fn connected_components(labels: &LabelMap) -> Segments {
    let (h, w) = labels.size();
    let data = labels.data();
    let mut ids = vec![usize::MAX; h * w];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if ids[start] != usize::MAX {
            continue;
        }
        let id = areas.len();
        let class = data[start];
        ids[start] = id;
        stack.push(start);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if ids[q] == usize::MAX && data[q] == class {
                    ids[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        areas.push(area);
    }
    Segments { ids, areas }
}
