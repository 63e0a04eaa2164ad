use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Closed polygon as `(x, y)` vertices in pixel coordinates, origin top-left.
pub type Polygon = Vec<(f64, f64)>;

/// Even-odd ray casting.
pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Binary mask: 1 where a pixel centre lies inside any polygon.
pub fn rasterize_polygons(polygons: &[Polygon], height: usize, width: usize) -> Result<Tensor> {
    if let Some(p) = polygons.iter().find(|p| p.len() < 3) {
        return Err(Error::Data(format!("polygon with {} vertices (need at least 3)", p.len())));
    }
    let mut mask = Tensor::zeros(Shape::new(1, height, width));
    for poly in polygons {
        let (min_y, max_y) = poly.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
        let (min_x, max_x) = poly.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
        let y1 = (max_y - 0.5).ceil().min(height as f64 - 1.0);
        let x1 = (max_x - 0.5).ceil().min(width as f64 - 1.0);
        if y1 < 0.0 || x1 < 0.0 {
            continue;
        }
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if point_in_polygon(poly, x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(0, y, x, 1.0);
                }
            }
        }
    }
    Ok(mask)
}
