//! Quality-control montage: triplanar slices of the cropped input, label
//! overlays and the warped template's edge map.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::stats::percentiles_sorted;
use crate::image::{LabelVolume, Volume3D};
use crate::labels::LabelDictionary;

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const EDGE_COLOR: [u8; 4] = [255, 220, 0, 255];
const EDGE_PERCENTILE: f64 = 90.0;
const WINDOW: (f64, f64) = (1.0, 99.0);

/// Index → RGBA. Background maps to fully transparent.
pub type ColorTable = BTreeMap<u16, [u8; 4]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

pub const PLANES: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

impl Plane {
    /// Volume axes shown horizontally and vertically, and the fixed axis.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (0, 1, 2),
            Plane::Coronal => (0, 2, 1),
            Plane::Sagittal => (1, 2, 0),
        }
    }
}

/// Montage geometry: three rows (original, label overlay, edge overlay) by
/// three columns (axial, coronal, sagittal). Column widths follow the plane,
/// every row is as tall as the tallest plane; panels are top-left aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QcLayout {
    /// (width, height) of each column's panel.
    pub panels: [[usize; 2]; 3],
    /// Slice index on the fixed axis of each plane.
    pub slices: [usize; 3],
    pub row_height: usize,
}

impl QcLayout {
    pub const ROWS: usize = 3;
    pub const COLUMNS: usize = 3;

    pub fn for_dims(dims: [usize; 3]) -> QcLayout {
        let panels = PLANES.map(|p| {
            let (h, v, _) = p.axes();
            [dims[h], dims[v]]
        });
        QcLayout {
            panels,
            slices: PLANES.map(|p| dims[p.axes().2] / 2),
            row_height: panels.iter().map(|p| p[1]).max().unwrap_or(0),
        }
    }

    pub fn width(&self) -> usize {
        self.panels.iter().map(|p| p[0]).sum()
    }

    pub fn height(&self) -> usize {
        Self::ROWS * self.row_height
    }

    /// Pixel position of the top-left corner of panel (row, column).
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (self.panels[..col].iter().map(|p| p[0]).sum(), row * self.row_height)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Colours by golden-ratio hue stepping on the label index.
pub fn label_colors(dictionary: &LabelDictionary) -> ColorTable {
    const PHI_INV: f64 = 0.618_033_988_749_894_9;
    let mut t = ColorTable::new();
    t.insert(0, [0, 0, 0, 0]);
    for i in dictionary.indices() {
        let h = (f64::from(i) * PHI_INV).fract();
        let [r, g, b] = hsv_to_rgb(h, 0.85, 0.95);
        t.insert(i, [r, g, b, 255]);
    }
    t
}

/// One 2D slice, row-major with the first row at the top (highest index on
/// the vertical axis).
struct Slice<T> {
    w: usize,
    h: usize,
    data: Vec<T>,
}

fn slice<T: Copy>(values: &[T], dims: [usize; 3], plane: Plane, at: usize) -> Slice<T> {
    let (ha, va, fa) = plane.axes();
    let (w, h) = (dims[ha], dims[va]);
    let mut data = Vec::with_capacity(w * h);
    for row in 0..h {
        let v = h - 1 - row;
        for u in 0..w {
            let mut c = [0usize; 3];
            c[ha] = u;
            c[va] = v;
            c[fa] = at;
            data.push(values[c[0] + dims[0] * (c[1] + dims[1] * c[2])]);
        }
    }
    Slice { w, h, data }
}

fn sobel(s: &Slice<f64>) -> Vec<f64> {
    let at = |x: i64, y: i64| s.data[(y.clamp(0, s.h as i64 - 1) as usize) * s.w + x.clamp(0, s.w as i64 - 1) as usize];
    let mut out = Vec::with_capacity(s.data.len());
    for y in 0..s.h as i64 {
        for x in 0..s.w as i64 {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Rendered montage before PNG encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct QcImage {
    pub layout: QcLayout,
    pub rgba: Vec<u8>,
}

impl QcImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let o = 4 * (y * self.layout.width() + x);
        [self.rgba[o], self.rgba[o + 1], self.rgba[o + 2], self.rgba[o + 3]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.layout.width() as u32, self.layout.height() as u32);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.rgba).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(buf)
    }
}

/// Compose the montage. Only voxels on the three displayed slices are read:
/// the grey window and the edge threshold come from those slices alone.
pub fn render_qc_image(input: &Volume3D, labels: &LabelVolume, template: &Volume3D) -> Result<QcImage> {
    input.grid().check_same(labels.grid(), "qc labels")?;
    input.grid().check_same(template.grid(), "qc template")?;
    let dims = input.dims();
    let layout = QcLayout::for_dims(dims);
    let colors = label_colors(labels.dictionary());

    let grey: Vec<Slice<f64>> = (0..3).map(|c| slice(input.data(), dims, PLANES[c], layout.slices[c])).collect();
    let lab: Vec<Slice<u16>> = (0..3).map(|c| slice(labels.labels(), dims, PLANES[c], layout.slices[c])).collect();
    let edges: Vec<Vec<f64>> = (0..3)
        .map(|c| sobel(&slice(template.data(), dims, PLANES[c], layout.slices[c])))
        .collect();

    let mut on_slices: Vec<f64> = grey.iter().flat_map(|s| s.data.iter().copied()).collect();
    let w = percentiles_sorted(&mut on_slices, &[WINDOW.0, WINDOW.1]);
    let (lo, span) = (w[0], (w[1] - w[0]).max(f64::MIN_POSITIVE));
    let mut mags: Vec<f64> = edges.iter().flatten().copied().collect();
    let thr = percentiles_sorted(&mut mags, &[EDGE_PERCENTILE])[0];

    let (width, height) = (layout.width(), layout.height());
    let mut rgba = vec![0u8; width * height * 4];
    for row in 0..QcLayout::ROWS {
        for col in 0..QcLayout::COLUMNS {
            let (ox, oy) = layout.origin(row, col);
            let g = &grey[col];
            for y in 0..g.h {
                for x in 0..g.w {
                    let k = y * g.w + x;
                    let v = (((g.data[k] - lo) / span).clamp(0.0, 1.0) * 255.0).round();
                    let mut px = [v, v, v];
                    match row {
                        1 => {
                            let c = colors.get(&lab[col].data[k]).copied().unwrap_or([255, 255, 255, 255]);
                            if c[3] > 0 {
                                for a in 0..3 {
                                    px[a] = (1.0 - OVERLAY_ALPHA) * px[a] + OVERLAY_ALPHA * f64::from(c[a]);
                                }
                            }
                        }
                        2 => {
                            let m = edges[col][k];
                            if m > 0.0 && m > thr {
                                px = [0, 1, 2].map(|a| f64::from(EDGE_COLOR[a]));
                            }
                        }
                        _ => {}
                    }
                    let o = 4 * ((oy + y) * width + ox + x);
                    for a in 0..3 {
                        rgba[o + a] = px[a].round() as u8;
                    }
                    rgba[o + 3] = 255;
                }
            }
        }
    }
    Ok(QcImage { layout, rgba })
}

/// Montage encoded as an 8-bit RGBA PNG.
pub fn render_qc(input: &Volume3D, labels: &LabelVolume, template: &Volume3D) -> Result<Vec<u8>> {
    render_qc_image(input, labels, template)?.to_png()
}
