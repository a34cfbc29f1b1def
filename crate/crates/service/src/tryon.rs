//! Placeholder try-on: pastes the garment image into a fixed upper-body box
//! of the person image. No garment warping happens here; the output only
//! lets a client exercise the full flow.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;

use closet_core::catalog::Item;
use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::{self, FilterType};
use image::{ImageEncoder, Rgba, RgbaImage};
use sha2::{Digest, Sha256};

use crate::config::PersonConfig;
use crate::state::StartupError;

/// Upper-body box as fractions of the person image: (x0, y0, x1, y1).
pub const UPPER_BODY: (f32, f32, f32, f32) = (0.25, 0.28, 0.75, 0.62);

const PERSON_SIZE: (u32, u32) = (240, 360);
const GARMENT_SIZE: u32 = 160;
const BUILTIN_PERSONS: [&str; 3] = ["model-1", "model-2", "model-3"];

fn palette(key: &str) -> [u8; 32] {
    Sha256::digest(key.as_bytes()).into()
}

fn rgb(h: &[u8]) -> Rgba<u8> {
    Rgba([h[0], h[1], h[2], 255])
}

/// Striped swatch coloured by the item id.
pub fn garment_placeholder(id: &str) -> RgbaImage {
    let h = palette(id);
    let (a, b) = (rgb(&h[0..3]), rgb(&h[3..6]));
    let period = 8 + (h[6] % 16) as u32;
    RgbaImage::from_fn(GARMENT_SIZE, GARMENT_SIZE, |x, y| if (x + y) / period % 2 == 0 { a } else { b })
}

/// Flat-shaded silhouette on a tinted background.
pub fn person_placeholder(id: &str) -> RgbaImage {
    let h = palette(id);
    let bg = Rgba([200 + h[0] % 56, 200 + h[1] % 56, 200 + h[2] % 56, 255]);
    let skin = Rgba([150 + h[3] % 90, 110 + h[4] % 80, 80 + h[5] % 70, 255]);
    let cloth = rgb(&h[6..9]);
    let (w, ht) = PERSON_SIZE;
    RgbaImage::from_fn(w, ht, |x, y| {
        let (fx, fy) = (x as f32 / w as f32, y as f32 / ht as f32);
        let head = (fx - 0.5).powi(2) + ((fy - 0.17) * 1.5).powi(2) < 0.012;
        let torso = (0.3..0.7).contains(&fx) && (0.27..0.65).contains(&fy);
        let legs = ((0.35..0.47).contains(&fx) || (0.53..0.65).contains(&fx)) && (0.65..0.97).contains(&fy);
        if head {
            skin
        } else if torso || legs {
            cloth
        } else {
            bg
        }
    })
}

/// Garment images resolved against an optional root directory.
pub struct ImageSource {
    root: Option<PathBuf>,
}

impl ImageSource {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    /// The item's image, or its placeholder when the file is absent or
    /// unreadable.
    pub fn garment(&self, item: &Item) -> RgbaImage {
        if let Some(root) = &self.root {
            let path = root.join(&item.image_ref);
            if path.is_file() {
                match image::open(&path) {
                    Ok(img) => return img.to_rgba8(),
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "garment image unreadable; using placeholder"),
                }
            }
        }
        garment_placeholder(&item.id)
    }
}

/// Person images by id: the configured files, or built-in placeholders
/// when none are configured.
pub struct PersonImages {
    images: BTreeMap<String, RgbaImage>,
}

impl PersonImages {
    pub fn load(persons: &[PersonConfig]) -> Result<Self, StartupError> {
        let mut images = BTreeMap::new();
        if persons.is_empty() {
            for id in BUILTIN_PERSONS {
                images.insert(id.to_owned(), person_placeholder(id));
            }
        }
        for p in persons {
            let img = image::open(&p.image).map_err(|e| StartupError::Person {
                path: p.image.clone(),
                reason: e.to_string(),
            })?;
            if images.insert(p.id.clone(), img.to_rgba8()).is_some() {
                return Err(StartupError::Person {
                    path: p.image.clone(),
                    reason: format!("duplicate person id {:?}", p.id),
                });
            }
        }
        Ok(Self { images })
    }

    pub fn get(&self, id: &str) -> Option<&RgbaImage> {
        self.images.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }
}

/// Person image with the garment resized into [`UPPER_BODY`].
pub fn compose(person: &RgbaImage, garment: &RgbaImage) -> RgbaImage {
    let (w, h) = person.dimensions();
    let (x0, y0, x1, y1) = UPPER_BODY;
    let bx = (x0 * w as f32).round() as u32;
    let by = (y0 * h as f32).round() as u32;
    let bw = ((x1 - x0) * w as f32).round().max(1.0) as u32;
    let bh = ((y1 - y0) * h as f32).round().max(1.0) as u32;
    let patch = imageops::resize(garment, bw, bh, FilterType::Triangle);
    let mut out = person.clone();
    imageops::overlay(&mut out, &patch, bx as i64, by as i64);
    out
}

pub fn encode_png(img: &RgbaImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    PngEncoder::new_with_quality(&mut buf, CompressionType::Default, PngFilter::Adaptive)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgba8)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_deterministic_and_distinct() {
        assert_eq!(garment_placeholder("a"), garment_placeholder("a"));
        assert_ne!(garment_placeholder("a"), garment_placeholder("b"));
        assert_eq!(encode_png(&person_placeholder("p")), encode_png(&person_placeholder("p")));
    }

    #[test]
    fn garment_lands_in_the_upper_body_box() {
        let person = RgbaImage::from_pixel(100, 200, Rgba([0, 0, 0, 255]));
        let garment = RgbaImage::from_pixel(10, 10, Rgba([255, 0, 0, 255]));
        let out = compose(&person, &garment);
        assert_eq!(out.dimensions(), (100, 200));
        assert_eq!(out.get_pixel(50, 90), &Rgba([255, 0, 0, 255]));
        assert_eq!(out.get_pixel(10, 90), &Rgba([0, 0, 0, 255]));
        assert_eq!(out.get_pixel(50, 20), &Rgba([0, 0, 0, 255]));
        assert_eq!(out.get_pixel(50, 190), &Rgba([0, 0, 0, 255]));
    }

    #[test]
    fn png_round_trips() {
        let img = garment_placeholder("x");
        let back = image::load_from_memory(&encode_png(&img)).unwrap().to_rgba8();
        assert_eq!(back, img);
    }
}
