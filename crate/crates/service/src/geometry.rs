//! Lasso resolution against stored projection coordinates.

/// Even-odd rule: a point is inside when a ray from it toward +x crosses the
/// boundary an odd number of times. Edges are half-open in y, so a ray
/// through a vertex counts it once.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let [px, py] = p;
    let mut inside = false;
    let mut j = polygon.len().wrapping_sub(1);
    for i in 0..polygon.len() {
        let [xi, yi] = polygon[i];
        let [xj, yj] = polygon[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}
