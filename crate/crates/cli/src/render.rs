//! PNG rendering of volume slices, contour composites and similarity maps.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use idlat::analysis::SimilarityMap;
use idlat::volume::Volume;
use idlat::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

/// Image-plane geometry for slicing along `axis`: `(width, height, depth)`
/// and the volume coordinate of image pixel `(u, v)` in slice `s`.
struct Plane {
    w: usize,
    h: usize,
    depth: usize,
    axis: Axis,
}

impl Plane {
    fn new(v: &Volume, axis: Axis) -> Self {
        let [nx, ny, nz] = v.dims.0;
        let (w, h, depth) = match axis {
            Axis::X => (ny, nz, nx),
            Axis::Y => (nx, nz, ny),
            Axis::Z => (nx, ny, nz),
        };
        Plane { w, h, depth, axis }
    }

    fn voxel(&self, v: &Volume, u: usize, w: usize, s: usize) -> usize {
        let (i, j, k) = match self.axis {
            Axis::X => (s, u, w),
            Axis::Y => (u, s, w),
            Axis::Z => (u, w, s),
        };
        v.dims.index(i, j, k)
    }
}

fn check_index(plane: &Plane, index: usize) -> Result<()> {
    if index >= plane.depth {
        return Err(Error::InvalidArgument(format!(
            "slice index {index} out of range for axis {:?} of depth {}",
            plane.axis, plane.depth
        )));
    }
    Ok(())
}

/// Grey-level slice. Included valid voxels map linearly from `range` onto
/// 1..=255; excluded or masked voxels are 0.
pub fn slice_image(
    v: &Volume,
    include: Option<&[bool]>,
    axis: Axis,
    index: usize,
    range: (f64, f64),
) -> Result<GrayImage> {
    let plane = Plane::new(v, axis);
    check_index(&plane, index)?;
    let span = if range.1 > range.0 {
        range.1 - range.0
    } else {
        1.0
    };
    let mut img = GrayImage::new(plane.w as u32, plane.h as u32);
    for w in 0..plane.h {
        for u in 0..plane.w {
            let idx = plane.voxel(v, u, w, index);
            let on = v.is_valid(idx) && include.is_none_or(|m| m[idx]);
            let level = if on {
                let t = ((v.values[idx] - range.0) / span).clamp(0.0, 1.0);
                1 + (t * 254.0).round() as u8
            } else {
                0
            };
            img.put_pixel(u as u32, w as u32, Luma([level]));
        }
    }
    Ok(img)
}

/// Binary contour image of the `isovalue` level set: a pixel is lit when it
/// and its right or lower neighbour lie on opposite sides. With `index`
/// unset every slice along the axis is composited.
pub fn contour_image(
    v: &Volume,
    include: Option<&[bool]>,
    axis: Axis,
    index: Option<usize>,
    isovalue: f64,
) -> Result<GrayImage> {
    let plane = Plane::new(v, axis);
    let slices: Vec<usize> = match index {
        Some(s) => {
            check_index(&plane, s)?;
            vec![s]
        }
        None => (0..plane.depth).collect(),
    };
    let on = |idx: usize| v.is_valid(idx) && include.is_none_or(|m| m[idx]);
    let mut img = GrayImage::new(plane.w as u32, plane.h as u32);
    for &s in &slices {
        for w in 0..plane.h {
            for u in 0..plane.w {
                let a = plane.voxel(v, u, w, s);
                if !on(a) {
                    continue;
                }
                let above = v.values[a] >= isovalue;
                let mut crosses = false;
                if u + 1 < plane.w {
                    let b = plane.voxel(v, u + 1, w, s);
                    crosses |= on(b) && (v.values[b] >= isovalue) != above;
                }
                if w + 1 < plane.h {
                    let b = plane.voxel(v, u, w + 1, s);
                    crosses |= on(b) && (v.values[b] >= isovalue) != above;
                }
                if crosses {
                    img.put_pixel(u as u32, w as u32, Luma([255]));
                }
            }
        }
    }
    Ok(img)
}

/// Diverging colour map over [-1, 1]: blue, white, red.
fn diverging(s: f64) -> Rgb<u8> {
    let t = s.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(-t), fade(-t), 255])
    }
}

/// Similarity heat map with `cell` pixels per entry; row `i` is drawn at the top.
pub fn heatmap(map: &SimilarityMap, cell: u32) -> RgbImage {
    let n = map.len() as u32;
    let cell = cell.max(1);
    RgbImage::from_fn(n * cell, n * cell, |x, y| {
        diverging(map.matrix[(y / cell) as usize][(x / cell) as usize])
    })
}

pub fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use idlat::volume::Dims;

    fn ramp() -> Volume {
        Volume::from_fn(Dims::new(4, 3, 2), |i, j, k| (i + 10 * j + 100 * k) as f64)
    }

    #[test]
    fn slice_geometry_and_levels() {
        let v = ramp();
        let img = slice_image(&v, None, Axis::Z, 1, (0.0, 123.0)).unwrap();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(
            img.get_pixel(0, 0)[0],
            1 + (100.0 / 123.0 * 254.0f64).round() as u8
        );
        assert_eq!(img.get_pixel(3, 2)[0], 255);
        assert_eq!(
            slice_image(&v, None, Axis::X, 0, (0.0, 1.0))
                .unwrap()
                .dimensions(),
            (3, 2)
        );
        assert!(slice_image(&v, None, Axis::Z, 2, (0.0, 1.0)).is_err());
        let mut include = vec![true; v.values.len()];
        include[v.dims.index(1, 0, 1)] = false;
        let masked = slice_image(&v, Some(&include), Axis::Z, 1, (0.0, 123.0)).unwrap();
        assert_eq!(masked.get_pixel(1, 0)[0], 0);
    }

    fn lit(img: &GrayImage) -> Vec<(u32, u32)> {
        img.enumerate_pixels()
            .filter(|p| p.2[0] == 255)
            .map(|p| (p.0, p.1))
            .collect()
    }

    #[test]
    fn contours_mark_crossings() {
        let v = ramp();
        let img = contour_image(&v, None, Axis::Z, Some(0), 1.5).unwrap();
        // row 0 holds 0..3 and row 1 holds 10..13
        assert_eq!(lit(&img), vec![(0, 0), (1, 0)]);
        let img = contour_image(&v, None, Axis::Z, Some(0), 21.5).unwrap();
        assert_eq!(lit(&img), vec![(2, 1), (3, 1), (1, 2)]);
        // only slice 1 crosses 101.5, and the union over slices shows it
        let all = contour_image(&v, None, Axis::Z, None, 101.5).unwrap();
        assert_eq!(lit(&all), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn heatmap_and_png() {
        let m = SimilarityMap::new(vec![1.0, 2.0], vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let img = heatmap(&m, 3);
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(4, 0), Rgb([0, 0, 255]));
        let png = png_bytes(&img).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
