//! Pixel containers, color conversion, full-reference metrics and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// PSNR reported for identical (or numerically indistinguishable) images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Row-major, channel-interleaved image with every scalar in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Returns the image with every scalar rounded to the nearest multiple of 1/255.
    pub fn quantized_8bit(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_u8_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// BT.601 full-range luma: `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn to_luma(img: &Image) -> Result<Image> {
    if img.channels == 1 {
        return Err(Error::AlreadyLuma);
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Ok(Image { height: img.height, width: img.width, channels: 1, data })
}

fn luma_view(img: &Image) -> Image {
    if img.channels == 1 {
        img.clone()
    } else {
        to_luma(img).expect("three-channel image")
    }
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the luma channel, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (ya, yb) = (luma_view(a), luma_view(b));
    let n = ya.data.len() as f64;
    let mse = ya.data.iter().zip(&yb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean structural similarity on luma, 11x11 Gaussian window (sigma 1.5),
/// evaluated at every position where the window fits entirely.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::TooSmallForWindow { h: a.height, w: a.width, window: SSIM_WINDOW });
    }
    let (ya, yb) = (luma_view(a), luma_view(b));
    let g = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW / 2);
    let w = a.width;
    let (oh, ow) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let i = (oy + dy) * w + ox + dx;
                    let (x, y) = (ya.data[i], yb.data[i]);
                    mx += wgt * x;
                    my += wgt * y;
                    sxx += wgt * x * x;
                    syy += wgt * y * y;
                    sxy += wgt * x * y;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Reads an 8-bit grayscale or RGB PNG.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let file = File::open(path.as_ref())?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(info.bit_depth as u8));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedColorType(format!("{other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let frame = reader.next_frame(&mut buf)?;
    let row_bytes = width * channels;
    let mut data = Vec::with_capacity(height * row_bytes);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size).take(height) {
        data.extend(row[..row_bytes].iter().map(|&b| f64::from(b) / 255.0));
    }
    Image::new(height, width, channels, data)
}

/// Writes the image as an 8-bit PNG (values rounded to the nearest 1/255).
pub fn write_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&img.to_u8_bytes())?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    d.push(f(y, x, c));
                }
            }
        }
        Image::new(h, w, 3, d).unwrap()
    }

    #[test]
    fn luma_of_primaries() {
        let white = Image::filled(1, 1, 3, 1.0).unwrap();
        assert!((to_luma(&white).unwrap().data()[0] - 1.0).abs() < 1e-12);
        let black = Image::filled(1, 1, 3, 0.0).unwrap();
        assert_eq!(to_luma(&black).unwrap().data()[0], 0.0);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_luma(&red).unwrap().data()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn luma_rejects_gray() {
        let g = Image::filled(2, 2, 1, 0.3).unwrap();
        let err = to_luma(&g).unwrap_err();
        assert!(err.to_string().contains("already luma"));
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn psnr_cap_and_constant_offset() {
        let a = Image::filled(8, 8, 3, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(8, 8, 3, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 8, 3, 0.6).unwrap();
        assert!(matches!(psnr(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = rgb(16, 16, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let h = Image::filled(12, 12, 1, 0.5).unwrap();
        assert!((ssim(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        let small = Image::filled(10, 12, 1, 0.5).unwrap();
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmallForWindow { .. })));
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let a = rgb(16, 16, |y, x, _| ((y + x) % 2) as f64);
        let b = rgb(16, 16, |y, x, _| 1.0 - ((y + x) % 2) as f64);
        let s = ssim(&a, &b).unwrap();

        // single-window direct formula at the top-left window
        let g = gaussian_kernel_1d(1.5, 5);
        let ya = luma_view(&a);
        let yb = luma_view(&b);
        let mut stats = [0.0; 5];
        for dy in 0..11 {
            for dx in 0..11 {
                let wgt = g[dy] * g[dx];
                let (x, y) = (ya.get(dy, dx, 0), yb.get(dy, dx, 0));
                stats[0] += wgt * x;
                stats[1] += wgt * y;
                stats[2] += wgt * x * x;
                stats[3] += wgt * y * y;
                stats[4] += wgt * x * y;
            }
        }
        let (mx, my) = (stats[0], stats[1]);
        let one = ((2.0 * mx * my + SSIM_C1) * (2.0 * (stats[4] - mx * my) + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (stats[2] - mx * mx + stats[3] - my * my + SSIM_C2));
        assert!(one < 0.0);
        assert!(s < 0.0, "ssim = {s}");
    }

    #[test]
    fn png_black_pixel_and_bad_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        write_png(&Image::filled(1, 1, 3, 0.0).unwrap(), &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), Image::new(1, 1, 3, vec![0.0; 3]).unwrap());

        let p16 = dir.path().join("deep.png");
        {
            let f = File::create(&p16).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 2 * 2 * 6]).unwrap();
        }
        let err = read_png(&p16).unwrap_err();
        assert!(err.to_string().contains("unsupported bit depth"), "{err}");

        let pal = dir.path().join("pal.png");
        {
            let f = File::create(&pal).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 1, 1);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(vec![0u8, 0, 0]);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8]).unwrap();
        }
        assert!(matches!(read_png(&pal), Err(Error::UnsupportedColorType(_))));
    }
}
