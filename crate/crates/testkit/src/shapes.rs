//! Small synthetic images of filled circles and squares with matching
//! VOC XML and CSV annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: [&str; 2] = ["circle", "square"];

#[derive(Debug, Clone)]
pub struct ShapeObject {
    pub class: &'static str,
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

#[derive(Debug, Clone)]
pub struct ShapeImage {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub png: Vec<u8>,
    pub objects: Vec<ShapeObject>,
}

impl ShapeImage {
    pub fn voc_xml(&self) -> String {
        let mut s = format!(
            "<annotation>\n  <folder>images</folder>\n  <filename>{}</filename>\n  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
            self.filename, self.width, self.height
        );
        for o in &self.objects {
            s.push_str(&format!(
                "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
                o.class, o.xmin, o.ymin, o.xmax, o.ymax
            ));
        }
        s.push_str("</annotation>\n");
        s
    }

    pub fn xml_name(&self) -> String {
        match self.filename.rsplit_once('.') {
            Some((stem, _)) => format!("{stem}.xml"),
            None => format!("{}.xml", self.filename),
        }
    }
}

pub fn annotations_csv(images: &[ShapeImage]) -> String {
    let mut s = String::from("filename,width,height,class,xmin,ymin,xmax,ymax\n");
    for img in images {
        for o in &img.objects {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                img.filename, img.width, img.height, o.class, o.xmin, o.ymin, o.xmax, o.ymax
            ));
        }
    }
    s
}

/// `n` images named `shape_000.png`…; image `i` always holds a
/// `CLASSES[i % 2]` so both classes appear once `n >= 2`.
pub fn shapes_dataset(n: usize, seed: u64) -> Vec<ShapeImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, height) = (64u32, 48u32);
    (0..n)
        .map(|i| {
            let mut px = image::RgbImage::from_pixel(width, height, image::Rgb([200, 200, 200]));
            let count = rng.gen_range(1..=2);
            let mut objects = Vec::new();
            for k in 0..count {
                let class = if k == 0 { CLASSES[i % 2] } else { CLASSES[rng.gen_range(0..2)] };
                let size = rng.gen_range(10..=20);
                let xmin = rng.gen_range(0..width - size);
                let ymin = rng.gen_range(0..height - size);
                let (xmax, ymax) = (xmin + size, ymin + size);
                let color = if class == "circle" { [200, 40, 40] } else { [40, 40, 200] };
                let (cx, cy, r) = ((xmin + xmax) as f64 / 2.0, (ymin + ymax) as f64 / 2.0, size as f64 / 2.0);
                for y in ymin..ymax {
                    for x in xmin..xmax {
                        let inside = class == "square" || {
                            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            dx * dx + dy * dy <= r * r
                        };
                        if inside {
                            px.put_pixel(x, y, image::Rgb(color));
                        }
                    }
                }
                objects.push(ShapeObject { class, xmin, ymin, xmax, ymax });
            }
            let mut png = Vec::new();
            px.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).expect("png encodes");
            ShapeImage {
                filename: format!("shape_{i:03}.png"),
                width,
                height,
                png,
                objects,
            }
        })
        .collect()
}
