use std::path::Path;

use nalgebra::Vector3;

use super::{GeometryError, Result};

/// Pinhole intrinsics expressed in feature-grid cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub principal: (f64, f64),
    /// (height, width)
    pub image_size: (usize, usize),
}

impl Camera {
    pub fn new(focal: f64, principal: (f64, f64), image_size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            focal,
            principal,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center.
    pub fn centered(focal: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(focal, (width as f64 / 2.0, height as f64 / 2.0), (height, width))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal {} must be > 0",
                self.focal
            )));
        }
        if h == 0 || w == 0 {
            return Err(GeometryError::InvalidCamera("image size must be non-zero".into()));
        }
        let (px, py) = self.principal;
        if !(0.0..=w as f64).contains(&px) || !(0.0..=h as f64).contains(&py) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({px}, {py}) outside {h}x{w} image"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    /// `(u, v)` image coordinates of a camera-frame point; `u` runs along columns.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.principal.0 + self.focal * p.x / p.z,
            self.principal.1 + self.focal * p.y / p.z,
        )
    }

    /// Row/column of the pixel containing `(u, v)`, if inside the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (h, w) = self.image_size;
        if u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64 {
            Some((v as usize, u as usize))
        } else {
            None
        }
    }

    /// `focal f`, `principal u v` and `size height width` lines.
    pub fn to_text(&self) -> String {
        format!(
            "focal {}\nprincipal {} {}\nsize {} {}\n",
            self.focal, self.principal.0, self.principal.1, self.image_size.0, self.image_size.1
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let (mut focal, mut principal, mut size) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| GeometryError::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad size {s:?}")));
            match (f[0], f.len()) {
                ("focal", 2) => focal = Some(num(f[1])?),
                ("principal", 3) => principal = Some((num(f[1])?, num(f[2])?)),
                ("size", 3) => size = Some((int(f[1])?, int(f[2])?)),
                _ => return Err(err(format!("unrecognized camera line {line:?}"))),
            }
        }
        let missing = |k: &str| GeometryError::InvalidCamera(format!("camera file lacks `{k}`"));
        let size = size.ok_or_else(|| missing("size"))?;
        let focal = focal.ok_or_else(|| missing("focal"))?;
        match principal {
            Some(p) => Self::new(focal, p, size),
            None => Self::centered(focal, size.0, size.1),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cam = Camera::new(52.5, (16.0, 15.5), (32, 30)).unwrap();
        assert_eq!(Camera::parse_text(&cam.to_text()).unwrap(), cam);
        let centered = Camera::parse_text("# c\nfocal 40\nsize 24 32\n").unwrap();
        assert_eq!(centered, Camera::centered(40.0, 24, 32).unwrap());
        assert!(Camera::parse_text("focal 40\n").is_err());
        assert!(Camera::parse_text("focal 40\nsize 0 3\n").is_err());
        assert!(Camera::parse_text("zoom 2\n").is_err());
    }
}
