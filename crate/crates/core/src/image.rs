//! 8-bit RGB images, binary PPM (P6) I/O, and the square crop-and-resize
//! that maps between image and model planes.

use std::io::{Read, Write};
use std::path::Path;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved RGB, row-major: `data[(y*width + x)*3 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        write!(file, "P6\n{} {}\n255\n", self.width, self.height)?;
        file.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        parse_ppm(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let mut token = |skip_comments: bool| -> std::result::Result<String, String> {
        // skip whitespace and optional '#' comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if skip_comments && pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(true)? != "P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let width: usize = token(true)?.parse().map_err(|_| "bad width")?;
    let height: usize = token(true)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(true)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(Image {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
    })
}

/// Square crop in intensity units (0..255), planar `[3][side][side]`.
#[derive(Clone, Debug)]
pub struct Crop {
    pub side: usize,
    pub data: Vec<f64>,
}

/// Affine map between the model plane (resized crop) and the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub cx: f64,
    pub cy: f64,
    /// Side of the square source region in image pixels.
    pub side: f64,
    /// Side of the resized output in model pixels.
    pub out_side: usize,
}

impl CropParams {
    /// resized / source ratio
    pub fn scale(&self) -> f64 {
        self.out_side as f64 / self.side
    }

    /// Continuous model-plane point to image-plane point.
    pub fn model_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.cx - self.side / 2.0 + u / self.scale(),
            self.cy - self.side / 2.0 + v / self.scale(),
        )
    }

    pub fn image_to_model(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - (self.cx - self.side / 2.0)) * self.scale(),
            (y - (self.cy - self.side / 2.0)) * self.scale(),
        )
    }

    /// A length normalized by the crop side, back to image pixels.
    pub fn norm_len_to_image(&self, n: f64) -> f64 {
        n * self.side
    }
}

/// Crop a square region of side `factor * sqrt(w*h)` centered on the box
/// and resize it to `out_side` with bilinear interpolation. Samples outside
/// the frame read the image's per-channel mean color.
pub fn crop_resize(
    img: &Image,
    center: &BBox,
    factor: f64,
    out_side: usize,
) -> Result<(Crop, CropParams)> {
    if factor <= 1.0 {
        return Err(Error::config(format!(
            "crop factor must exceed 1, got {factor}"
        )));
    }
    if !(center.w > 0.0 && center.h > 0.0) {
        return Err(Error::contract("degenerate box for crop"));
    }
    let side = factor * (center.w * center.h).sqrt();
    if !(side.is_finite() && side > 0.0) {
        return Err(Error::contract(format!("degenerate crop side {side}")));
    }
    let params = CropParams {
        cx: center.cx,
        cy: center.cy,
        side,
        out_side,
    };
    let mean = img.mean_color();
    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
            mean[c]
        } else {
            img.pixel(x as usize, y as usize)[c] as f64
        }
    };
    let mut data = vec![0.0f64; 3 * out_side * out_side];
    let step = side / out_side as f64;
    let origin_x = center.cx - side / 2.0;
    let origin_y = center.cy - side / 2.0;
    for i in 0..out_side {
        // pixel centers, in pixel-center sample space
        let sy = origin_y + (i as f64 + 0.5) * step - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        for j in 0..out_side {
            let sx = origin_x + (j as f64 + 0.5) * step - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            for c in 0..3 {
                let p00 = sample(x0 as isize, y0 as isize, c);
                let p10 = sample(x0 as isize + 1, y0 as isize, c);
                let p01 = sample(x0 as isize, y0 as isize + 1, c);
                let p11 = sample(x0 as isize + 1, y0 as isize + 1, c);
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bottom = p01 * (1.0 - fx) + p11 * fx;
                data[(c * out_side + i) * out_side + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok((
        Crop {
            side: out_side,
            data,
        },
        params,
    ))
}

/// Intensities to standardized model inputs: `((v/255) - mean) / std`.
pub fn standardize<T: Real>(crop: &Crop, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let s = crop.side;
    let mut out = Tensor::zeros(&[3, s, s]);
    for c in 0..3 {
        for i in 0..s * s {
            let v = crop.data[c * s * s + i] / 255.0;
            out.data_mut()[c * s * s + i] = T::from_f64((v - mean[c]) / std[c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("stdtrack_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = Image::new(7, 5);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 31 % 256) as u8;
        }
        let path = dir.join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn crop_center_round_trips_within_half_pixel() {
        let img = Image::new(64, 64);
        let b = BBox::new(30.0, 27.0, 10.0, 10.0).unwrap();
        let (_, params) = crop_resize(&img, &b, 2.0, 32).unwrap();
        let (x, y) = params.model_to_image(16.0, 16.0);
        assert!((x - 30.0).abs() < 0.5, "x={x}");
        assert!((y - 27.0).abs() < 0.5, "y={y}");
        let (u, v) = params.image_to_model(30.0, 27.0);
        assert!((u - 16.0).abs() < 1e-9 && (v - 16.0).abs() < 1e-9);
    }

    #[test]
    fn identity_scale_crop_reproduces_pixels() {
        // factor * sqrt(w*h) == out_side makes the map the identity up to
        // translation, so sampled values hit pixel centers exactly.
        let mut img = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.set_pixel(x, y, [(x * 8) as u8, (y * 8) as u8, 99]);
            }
        }
        let b = BBox::new(16.0, 16.0, 8.0, 8.0).unwrap();
        let (crop, params) = crop_resize(&img, &b, 2.0, 16).unwrap();
        assert_eq!(params.side, 16.0);
        for i in 0..16 {
            for j in 0..16 {
                let x = 8 + j;
                let y = 8 + i;
                let expect = img.pixel(x, y);
                for c in 0..3 {
                    let got = crop.data[(c * 16 + i) * 16 + j];
                    assert!(
                        (got - expect[c] as f64).abs() < 1e-9,
                        "({i},{j},{c}): {got} vs {}",
                        expect[c]
                    );
                }
            }
        }
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let bytes = b"P6\n4 4\n255\nshort";
        assert!(parse_ppm(bytes).is_err());
    }
}
