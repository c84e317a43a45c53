//! COCO-format instance annotations: polygon and RLE decoding.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::RgbImage;
use serde::Deserialize;
use serde_json::Value;

use crate::dataset::InstanceRecord;
use crate::error::{Error, Result};
use crate::imaging::load_rgb;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Deserialize)]
pub struct CocoDocument {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Value,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

pub fn parse_document(text: &str) -> Result<CocoDocument> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        record: "annotation document".into(),
        message: e.to_string(),
    })
}

/// Rasterizes polygons by testing each pixel centre with the even-odd rule.
/// Multiple polygons are unioned.
pub fn rasterize_polygons(polygons: &[Vec<f64>], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for poly in polygons {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        let (mut ymin, mut ymax) = (f64::MAX, f64::MIN);
        for &(_, y) in &pts {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        let y_start = (ymin - 0.5).ceil().max(0.0) as usize;
        let y_end = ((ymax - 0.5).floor().max(-1.0) + 1.0).min(height as f64) as usize;
        for y in y_start..y_end {
            let py = y as f64 + 0.5;
            for x in 0..width {
                if point_in_polygon(x as f64 + 0.5, py, &pts) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

fn point_in_polygon(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Decodes run lengths (alternating background/foreground, starting with
/// background) laid out in column-major order.
pub fn decode_rle_counts(counts: &[u64], width: usize, height: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (width * height) as u64 {
        return Err(Error::Parse {
            record: "rle".into(),
            message: format!("run lengths sum to {total}, expected {}", width * height),
        });
    }
    let mut mask = BinaryMask::new(width, height);
    let mut idx = 0usize;
    for (k, &run) in counts.iter().enumerate() {
        if k % 2 == 1 {
            for i in idx..idx + run as usize {
                mask.set(i / height, i % height, true);
            }
        }
        idx += run as usize;
    }
    Ok(mask)
}

pub fn encode_rle_counts(mask: &BinaryMask) -> Vec<u64> {
    let (w, h) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes the compact COCO string form of run lengths.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = *bytes.get(p).ok_or_else(|| Error::Parse {
                record: "rle".into(),
                message: "truncated compressed counts".into(),
            })? as i64
                - 48;
            if !(0..64).contains(&c) {
                return Err(Error::Parse {
                    record: "rle".into(),
                    message: format!("invalid character at offset {p}"),
                });
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| {
            u64::try_from(c).map_err(|_| Error::Parse {
                record: "rle".into(),
                message: "negative run length".into(),
            })
        })
        .collect()
}

pub fn encode_rle_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for i in 0..counts.len() {
        let mut x = counts[i] as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

/// Decodes one annotation's `segmentation` field.
pub fn decode_segmentation(seg: &Value, width: usize, height: usize) -> std::result::Result<BinaryMask, String> {
    match seg {
        Value::Array(polys) => {
            let polys: Vec<Vec<f64>> = polys
                .iter()
                .map(|p| {
                    p.as_array()
                        .ok_or("polygon is not an array")?
                        .iter()
                        .map(|v| v.as_f64().ok_or("polygon coordinate is not a number"))
                        .collect::<std::result::Result<Vec<f64>, _>>()
                })
                .collect::<std::result::Result<_, &str>>()?;
            if polys.iter().any(|p| p.len() % 2 != 0) {
                return Err("polygon has an odd number of coordinates".into());
            }
            Ok(rasterize_polygons(&polys, width, height))
        }
        Value::Object(obj) => {
            if let Some(size) = obj.get("size").and_then(Value::as_array) {
                let dims: Vec<u64> = size.iter().filter_map(Value::as_u64).collect();
                if dims != [height as u64, width as u64] {
                    return Err(format!("rle size {dims:?} does not match image {height}x{width}"));
                }
            }
            let counts = match obj.get("counts") {
                Some(Value::Array(c)) => c
                    .iter()
                    .map(|v| v.as_u64().ok_or("rle count is not a non-negative integer"))
                    .collect::<std::result::Result<Vec<u64>, _>>()?,
                Some(Value::String(s)) => decode_rle_string(s).map_err(|e| e.to_string())?,
                _ => return Err("rle has no counts".into()),
            };
            decode_rle_counts(&counts, width, height).map_err(|e| e.to_string())
        }
        _ => Err("segmentation is neither polygons nor rle".into()),
    }
}

/// Groups decoded instances by image, in document order. Images without
/// annotations are skipped; images are loaded through `load`.
pub fn group_instances(
    doc: &CocoDocument,
    mut load: impl FnMut(&CocoImage) -> Result<RgbImage>,
) -> Result<Vec<(RgbImage, Vec<InstanceRecord>)>> {
    let cats: HashMap<u64, &str> = doc.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let images: HashMap<u64, &CocoImage> = doc.images.iter().map(|i| (i.id, i)).collect();
    let mut grouped: BTreeMap<usize, Vec<InstanceRecord>> = BTreeMap::new();
    let order: HashMap<u64, usize> = doc.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    for ann in &doc.annotations {
        let record = format!("annotation {}", ann.id);
        let img = images.get(&ann.image_id).ok_or_else(|| Error::Parse {
            record: record.clone(),
            message: format!("unknown image_id {}", ann.image_id),
        })?;
        let name = cats.get(&ann.category_id).ok_or_else(|| Error::Parse {
            record: record.clone(),
            message: format!("unknown category_id {}", ann.category_id),
        })?;
        let mask = decode_segmentation(&ann.segmentation, img.width, img.height)
            .map_err(|message| Error::Parse { record, message })?;
        grouped
            .entry(order[&ann.image_id])
            .or_default()
            .push(InstanceRecord::new(ann.id, ann.image_id, name, mask));
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (idx, instances) in grouped {
        let meta = &doc.images[idx];
        let img = load(meta)?;
        if (img.width() as usize, img.height() as usize) != (meta.width, meta.height) {
            return Err(Error::Parse {
                record: format!("image {}", meta.id),
                message: format!(
                    "file is {}x{}, annotation says {}x{}",
                    img.width(),
                    img.height(),
                    meta.width,
                    meta.height
                ),
            });
        }
        out.push((img, instances));
    }
    Ok(out)
}

/// Reads an annotation file and the images it references.
pub fn ingest_instances(
    annotation_file: &Path,
    image_dir: &Path,
) -> Result<Vec<(RgbImage, Vec<InstanceRecord>)>> {
    let text = std::fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let doc = parse_document(&text)?;
    group_instances(&doc, |meta| load_rgb(image_dir.join(&meta.file_name)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn brute_force_square(x0: usize, y0: usize, side: usize, w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
    }

    #[test]
    fn ten_by_ten_polygon_has_area_100() {
        let poly = vec![vec![5.0, 7.0, 15.0, 7.0, 15.0, 17.0, 5.0, 17.0]];
        let m = rasterize_polygons(&poly, 32, 24);
        assert_eq!(m.area(), 100);
        assert_eq!(m, brute_force_square(5, 7, 10, 32, 24));
    }

    #[test]
    fn polygon_matches_brute_force_point_test() {
        let tri = vec![2.3, 1.1, 19.7, 4.2, 8.8, 14.9];
        let pts: Vec<(f64, f64)> = tri.chunks(2).map(|c| (c[0], c[1])).collect();
        let m = rasterize_polygons(&[tri.clone()], 24, 20);
        // Barycentric sign test on pixel centres.
        let sign = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        for y in 0..20 {
            for x in 0..24 {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let s = [sign(pts[0], pts[1], p), sign(pts[1], pts[2], p), sign(pts[2], pts[0], p)];
                let inside = s.iter().all(|&v| v > 0.0) || s.iter().all(|&v| v < 0.0);
                assert_eq!(m.get(x, y), inside, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn rle_and_polygon_decode_identically() {
        let poly = json!([[3.0, 2.0, 12.0, 2.0, 12.0, 9.0, 3.0, 9.0]]);
        let from_poly = decode_segmentation(&poly, 16, 12).unwrap();
        let counts = encode_rle_counts(&from_poly);
        let raw = json!({"size": [12, 16], "counts": counts});
        let compact = json!({"size": [12, 16], "counts": encode_rle_string(&counts)});
        assert_eq!(decode_segmentation(&raw, 16, 12).unwrap(), from_poly);
        assert_eq!(decode_segmentation(&compact, 16, 12).unwrap(), from_poly);
    }

    #[test]
    fn known_compressed_string() {
        // 3x3 mask with a single foreground pixel at column 1, row 1:
        // runs [4, 1, 4] in column-major order.
        let s = encode_rle_string(&[4, 1, 4]);
        assert_eq!(decode_rle_string(&s).unwrap(), vec![4, 1, 4]);
        let m = decode_rle_counts(&[4, 1, 4], 3, 3).unwrap();
        assert!(m.get(1, 1));
        assert_eq!(m.area(), 1);
    }

    #[test]
    fn empty_annotation_list_gives_empty_result() {
        let doc = parse_document(r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],"annotations":[],"categories":[]}"#).unwrap();
        let out = group_instances(&doc, |_| panic!("no image should be loaded")).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn malformed_annotation_names_the_record() {
        let doc = parse_document(
            r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],
                "annotations":[{"id":77,"image_id":1,"category_id":1,"segmentation":[[0,0,1]]}],
                "categories":[{"id":1,"name":"cup"}]}"#,
        )
        .unwrap();
        let err = group_instances(&doc, |_| Ok(RgbImage::new(4, 4))).unwrap_err();
        assert!(err.to_string().contains("annotation 77"), "{err}");
    }

    #[test]
    fn missing_image_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("ann.json");
        std::fs::write(
            &ann,
            r#"{"images":[{"id":1,"file_name":"missing.png","width":4,"height":4}],
                "annotations":[{"id":1,"image_id":1,"category_id":1,"segmentation":[[0,0,3,0,3,3]]}],
                "categories":[{"id":1,"name":"cup"}]}"#,
        )
        .unwrap();
        assert!(matches!(ingest_instances(&ann, dir.path()), Err(Error::Io { .. })));
    }
}
