use crate::error::{Error, Result};

/// Row-major `height × width × channels` image with `f32` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!("image {height}x{width}x{channels} has an empty side")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Copies the `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image { height: h, width: w, channels: c, data })
    }

    /// Bilinear resize with half-pixel centers; same-size resize is the identity.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let c = self.channels;
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for ch in 0..c {
                    let top = self.at(y0, x0, ch) * (1.0 - wx) + self.at(y0, x1, ch) * wx;
                    let bottom = self.at(y1, x0, ch) * (1.0 - wx) + self.at(y1, x1, ch) * wx;
                    data.push(top * (1.0 - wy) + bottom * wy);
                }
            }
        }
        Image { height: out_h, width: out_w, channels: c, data }
    }

    /// Mirrors columns.
    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[start..start + c]);
            }
        }
        Image { data, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, 1, (0..h * w).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(5, 5);
        assert_eq!(img.resize(5, 5), img);
    }

    #[test]
    fn upsample_then_constant_image_stays_constant() {
        let img = Image::new(3, 3, 2, vec![0.25; 18]).unwrap();
        let big = img.resize(7, 7);
        assert!(big.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn crop_and_flip() {
        let img = ramp(4, 4);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data, vec![6.0, 7.0, 10.0, 11.0]);
        assert_eq!(c.flip_horizontal().data, vec![7.0, 6.0, 11.0, 10.0]);
        assert!(img.crop(3, 3, 2, 2).is_err());
    }
}
