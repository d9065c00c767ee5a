//! In-memory RGB drawing backend for plotters, with text rasterised by ab_glyph.

use ab_glyph::{point, Font, FontRef, PxScale, ScaleFont};
use plotters_backend::text_anchor::{HPos, VPos};
use plotters_backend::{BackendColor, BackendCoord, BackendTextStyle, DrawingBackend, DrawingErrorKind};

use crate::error::{Error, Result};
use crate::image::ImageU8;

static FONT_BYTES: &[u8] = include_bytes!("../../assets/DejaVuSans.ttf");

fn font() -> FontRef<'static> {
    FontRef::try_from_slice(FONT_BYTES).expect("bundled font parses")
}

/// White RGB canvas that a [`RasterBackend`] draws into.
pub struct Canvas {
    pub width: u32,
    pub height: u32,
    rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Canvas { width, height, rgb: vec![255; (width * height * 3) as usize] }
    }

    pub fn backend(&mut self) -> RasterBackend<'_> {
        RasterBackend { width: self.width, height: self.height, rgb: &mut self.rgb, font: font() }
    }

    pub fn into_image(self) -> Result<ImageU8> {
        ImageU8::new(self.height as usize, self.width as usize, 3, self.rgb)
    }
}

pub struct RasterBackend<'a> {
    width: u32,
    height: u32,
    rgb: &'a mut [u8],
    font: FontRef<'static>,
}

impl RasterBackend<'_> {
    fn blend(&mut self, x: i32, y: i32, rgb: (u8, u8, u8), alpha: f64) {
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 || alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        for (k, c) in [rgb.0, rgb.1, rgb.2].into_iter().enumerate() {
            let old = self.rgb[i + k] as f64;
            self.rgb[i + k] = (old + (c as f64 - old) * a).round() as u8;
        }
    }

    /// Width, ascent and descent of `text` in pixels.
    fn measure(&self, text: &str, size: f64) -> (f32, f32, f32) {
        let f = self.font.as_scaled(PxScale::from(size as f32));
        let mut w = 0.0;
        let mut prev = None;
        for c in text.chars() {
            let id = f.glyph_id(c);
            if let Some(p) = prev {
                w += f.kern(p, id);
            }
            w += f.h_advance(id);
            prev = Some(id);
        }
        (w, f.ascent(), -f.descent())
    }
}

impl DrawingBackend for RasterBackend<'_> {
    type ErrorType = std::io::Error;

    fn get_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn ensure_prepared(&mut self) -> std::result::Result<(), DrawingErrorKind<Self::ErrorType>> {
        Ok(())
    }

    fn present(&mut self) -> std::result::Result<(), DrawingErrorKind<Self::ErrorType>> {
        Ok(())
    }

    fn draw_pixel(&mut self, p: BackendCoord, c: BackendColor) -> std::result::Result<(), DrawingErrorKind<Self::ErrorType>> {
        self.blend(p.0, p.1, c.rgb, c.alpha);
        Ok(())
    }

    fn draw_text<T: BackendTextStyle>(
        &mut self,
        text: &str,
        style: &T,
        pos: BackendCoord,
    ) -> std::result::Result<(), DrawingErrorKind<Self::ErrorType>> {
        let color = style.color();
        if color.alpha == 0.0 {
            return Ok(());
        }
        let size = style.size();
        let (w, ascent, descent) = self.measure(text, size);
        let h = ascent + descent;
        let dx = match style.anchor().h_pos {
            HPos::Left => 0.0,
            HPos::Right => -w,
            HPos::Center => -w / 2.0,
        };
        let dy = match style.anchor().v_pos {
            VPos::Top => 0.0,
            VPos::Center => -h / 2.0,
            VPos::Bottom => -h,
        };
        let scale = PxScale::from(size as f32);
        let f = self.font.as_scaled(scale);
        let trans = style.transform();
        let mut caret = 0.0;
        let mut prev = None;
        let mut coverage = Vec::new();
        for c in text.chars() {
            let id = f.glyph_id(c);
            if let Some(p) = prev {
                caret += f.kern(p, id);
            }
            let glyph = id.with_scale_and_position(scale, point(caret + dx, ascent + dy));
            caret += f.h_advance(id);
            prev = Some(id);
            if let Some(outlined) = self.font.outline_glyph(glyph) {
                let b = outlined.px_bounds();
                outlined.draw(|gx, gy, cov| {
                    coverage.push((b.min.x as i32 + gx as i32, b.min.y as i32 + gy as i32, cov));
                });
            }
        }
        for (x, y, cov) in coverage {
            let (tx, ty) = trans.transform(x, y);
            self.blend(pos.0 + tx, pos.1 + ty, color.rgb, color.alpha * cov as f64);
        }
        Ok(())
    }

    fn estimate_text_size<T: BackendTextStyle>(
        &self,
        text: &str,
        style: &T,
    ) -> std::result::Result<(u32, u32), DrawingErrorKind<Self::ErrorType>> {
        let (w, a, d) = self.measure(text, style.size());
        Ok((w.ceil() as u32, (a + d).ceil() as u32))
    }
}

pub(crate) fn plot_error<E: std::fmt::Debug>(e: E) -> Error {
    Error::State(format!("plot rendering failed: {e:?}"))
}
