//! Named colors under a pointing fingertip.

use std::io::Read;

use image::RgbImage;
use serde::Deserialize;
use thiserror::Error;

use crate::types::Hand;

const BUILTIN_TABLE: &str = include_str!("../assets/colors.csv");

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("color table: {0}")]
    Csv(#[from] csv::Error),
    #[error("color table: duplicate name {0:?}")]
    DuplicateName(String),
    #[error("color table is empty")]
    EmptyTable,
    #[error("sample window at ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds { x: i64, y: i64, width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl NamedColor {
    pub fn rgb(&self) -> [f64; 3] {
        [f64::from(self.r), f64::from(self.g), f64::from(self.b)]
    }
}

/// Entries sorted by name so the first minimum found is the alphabetical one.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorTable {
    entries: Vec<NamedColor>,
}

impl ColorTable {
    /// The 147 extended web color names.
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN_TABLE.as_bytes()).expect("embedded color table is valid")
    }

    /// CSV with a `name,r,g,b` header.
    pub fn from_csv(reader: impl Read) -> Result<Self, ColorError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries: Vec<NamedColor> = rdr.deserialize().collect::<Result<_, _>>()?;
        if entries.is_empty() {
            return Err(ColorError::EmptyTable);
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = entries.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(ColorError::DuplicateName(w[0].name.clone()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NamedColor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest squared RGB distance; ties go to the alphabetically first name.
    pub fn nearest(&self, rgb: [f64; 3]) -> &str {
        let mut best = &self.entries[0];
        let mut best_d = f64::INFINITY;
        for e in &self.entries {
            let d = squared_distance(rgb, e.rgb());
            if d < best_d {
                best = e;
                best_d = d;
            }
        }
        &best.name
    }
}

pub fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn nearest_named_color(table: &ColorTable, rgb: [f64; 3]) -> &str {
    table.nearest(rgb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleParams {
    /// Offset of the window center from the fingertip, in pixels.
    pub offset: u32,
    /// Window side, in pixels.
    pub window: u32,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self { offset: 16, window: 24 }
    }
}

/// Mean RGB of a window up and away from the finger: up-left for a pointing
/// right hand, up-right for a left one. The window is clipped to the image.
pub fn sample_region(
    image: &RgbImage,
    fingertip_px: (f64, f64),
    pointing: Hand,
    p: &SampleParams,
) -> Result<[f64; 3], ColorError> {
    let (w, h) = image.dimensions();
    let o = f64::from(p.offset);
    let dx = match pointing {
        Hand::Right => -o,
        Hand::Left => o,
    };
    let cx = (fingertip_px.0 + dx).floor() as i64;
    let cy = (fingertip_px.1 - o).floor() as i64;
    let half = i64::from(p.window / 2);
    let x0 = cx - half;
    let y0 = cy - half;
    let x1 = x0 + i64::from(p.window);
    let y1 = y0 + i64::from(p.window);
    let (cx0, cy0) = (x0.max(0), y0.max(0));
    let (cx1, cy1) = (x1.min(i64::from(w)), y1.min(i64::from(h)));
    if cx0 >= cx1 || cy0 >= cy1 {
        return Err(ColorError::OutOfBounds {
            x: cx,
            y: cy,
            width: w,
            height: h,
        });
    }
    let mut sum = [0.0f64; 3];
    for y in cy0..cy1 {
        for x in cx0..cx1 {
            let px = image.get_pixel(x as u32, y as u32);
            for (acc, v) in sum.iter_mut().zip(px.0) {
                *acc += f64::from(v);
            }
        }
    }
    let n = ((cx1 - cx0) * (cy1 - cy0)) as f64;
    Ok(sum.map(|s| s / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn table_basics() {
        let t = ColorTable::builtin();
        assert_eq!(t.len(), 147);
        assert_eq!(t.nearest([255.0, 0.0, 0.0]), "red");
        assert_eq!(t.nearest([0.0, 0.0, 0.0]), "black");
        assert_eq!(t.nearest([250.0, 128.0, 115.0]), "salmon");
        assert_eq!(t.nearest([0.0, 255.0, 255.0]), "aqua");
    }

    #[test]
    fn custom_table() {
        let t = ColorTable::from_csv("name,r,g,b\nzed,10,10,10\nalpha,10,10,10\n".as_bytes()).unwrap();
        assert_eq!(t.nearest([11.0, 10.0, 10.0]), "alpha");
        let dup = ColorTable::from_csv("name,r,g,b\na,1,1,1\na,2,2,2\n".as_bytes());
        assert!(matches!(dup, Err(ColorError::DuplicateName(_))));
        assert!(ColorTable::from_csv("name,r,g,b\nx,300,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn sampling() {
        let p = SampleParams::default();
        let red = RgbImage::from_pixel(100, 100, Rgb([255, 0, 0]));
        assert_eq!(
            sample_region(&red, (50.0, 50.0), Hand::Right, &p).unwrap(),
            [255.0, 0.0, 0.0]
        );

        let split = RgbImage::from_fn(
            100,
            100,
            |x, _| if x < 50 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) },
        );
        // center 30: window 18..42, all black
        assert_eq!(sample_region(&split, (46.0, 60.0), Hand::Right, &p).unwrap(), [0.0; 3]);
        // center 50: window 38..62, half and half
        assert_eq!(sample_region(&split, (34.0, 60.0), Hand::Left, &p).unwrap(), [127.5; 3]);

        let err = sample_region(&red, (5.0, 5.0), Hand::Right, &SampleParams { offset: 40, window: 24 });
        assert!(matches!(err, Err(ColorError::OutOfBounds { .. })));
    }
}
