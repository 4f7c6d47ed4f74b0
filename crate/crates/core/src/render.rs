//! Heatmap upscaling and PNG rendering.

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

/// Bilinear upscaling with corner-aligned sampling.
pub fn upscale_map(map: &SaliencyMap, target: (usize, usize)) -> Result<SaliencyMap> {
    let (th, tw) = target;
    if th < map.height || tw < map.width {
        return Err(Error::Validation(format!(
            "cannot upscale {}x{} map to smaller {th}x{tw}",
            map.height, map.width
        )));
    }
    let scale = |dst: usize, src: usize| {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(th, map.height), scale(tw, map.width));
    let mut data = Vec::with_capacity(th * tw);
    for i in 0..th {
        let y = i as f64 * sy;
        let y0 = (y.floor() as usize).min(map.height - 1);
        let y1 = (y0 + 1).min(map.height - 1);
        let fy = y - y0 as f64;
        for j in 0..tw {
            let x = j as f64 * sx;
            let x0 = (x.floor() as usize).min(map.width - 1);
            let x1 = (x0 + 1).min(map.width - 1);
            let fx = x - x0 as f64;
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(SaliencyMap {
        height: th,
        width: tw,
        data,
        kind: map.kind,
        class_index: map.class_index,
    })
}

/// Blue at 0, green at 0.5, red at 1, linear in between.
pub fn color_ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (r, g, b) = if t <= 0.5 {
        let s = t * 2.0;
        (0.0, s, 1.0 - s)
    } else {
        let s = (t - 0.5) * 2.0;
        (s, 1.0 - s, 0.0)
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Colors a normalized map and, when an image is given, blends it 50/50 over
/// the image resized to the map size. Returns PNG bytes.
pub fn render_overlay(map: &SaliencyMap, image: Option<&RgbImage>) -> Result<Vec<u8>> {
    let (w, h) = (map.width as u32, map.height as u32);
    let background = image.map(|img| {
        if img.dimensions() == (w, h) {
            img.clone()
        } else {
            image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
        }
    });
    let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
        let heat = color_ramp(map.get(y as usize, x as usize));
        match &background {
            Some(bg) => {
                let p = bg.get_pixel(x, y).0;
                let mut out = [0u8; 3];
                for c in 0..3 {
                    out[c] = (heat[c] as u16 + p[c] as u16).div_ceil(2) as u8;
                }
                Rgb(out)
            }
            None => Rgb(heat),
        }
    });
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Render(e.to_string()))?;
    Ok(bytes)
}

pub fn load_rgb(path: &std::path::Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Render(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::MapKind;

    fn map(h: usize, w: usize, data: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            height: h,
            width: w,
            data,
            kind: MapKind::GradCam,
            class_index: 0,
        }
    }

    #[test]
    fn constant_map_stays_constant() {
        let up = upscale_map(&map(1, 1, vec![0.5]), (4, 6)).unwrap();
        assert!(up.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn center_is_mean_of_corners() {
        let up = upscale_map(&map(2, 2, vec![1.0, 0.0, 0.0, 0.5]), (3, 3)).unwrap();
        assert!((up.get(1, 1) - 0.375).abs() < 1e-15);
        assert_eq!(up.get(0, 0), 1.0);
        assert_eq!(up.get(2, 2), 0.5);
    }

    #[test]
    fn same_size_is_identity() {
        let m = map(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(upscale_map(&m, (2, 3)).unwrap(), m);
    }

    #[test]
    fn upscale_stays_in_range() {
        let m = map(3, 3, vec![0.2, 0.9, 0.4, 0.3, 0.25, 0.8, 0.7, 0.6, 0.5]);
        let up = upscale_map(&m, (17, 11)).unwrap();
        assert!(up.data.iter().all(|&v| (0.2 - 1e-12..=0.9 + 1e-12).contains(&v)));
        assert!(upscale_map(&m, (2, 5)).is_err());
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(color_ramp(0.0), [0, 0, 255]);
        assert_eq!(color_ramp(0.5), [0, 255, 0]);
        assert_eq!(color_ramp(1.0), [255, 0, 0]);
        assert_eq!(color_ramp(0.25), [0, 128, 128]);
    }

    fn decode(bytes: &[u8]) -> RgbImage {
        image::load_from_memory(bytes).unwrap().to_rgb8()
    }

    #[test]
    fn uniform_maps_render_endpoint_colors() {
        let blue = decode(&render_overlay(&map(2, 2, vec![0.0; 4]), None).unwrap());
        assert!(blue.pixels().all(|p| p.0 == [0, 0, 255]));
        let red = decode(&render_overlay(&map(2, 2, vec![1.0; 4]), None).unwrap());
        assert!(red.pixels().all(|p| p.0 == [255, 0, 0]));
    }

    #[test]
    fn overlay_blends_with_image() {
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        let out = decode(&render_overlay(&map(2, 2, vec![0.0; 4]), Some(&img)).unwrap());
        assert_eq!(out.dimensions(), (2, 2));
        assert!(out.pixels().all(|p| p.0 == [128, 128, 255]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = map(3, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0]);
        assert_eq!(render_overlay(&m, None).unwrap(), render_overlay(&m, None).unwrap());
    }
}
