use ndarray::Array3;
use serde_json::json;
use stampgen::dataset::tight_bbox;
use stampgen::imageio::save_image;
use stampgen::{Dataset, ImageTensor};

fn write_image(dir: &std::path::Path, name: &str, h: usize, w: usize) {
    let img = ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y + 2 * x + 3 * c) % 17) as f32 / 8.5 - 1.0)).unwrap();
    save_image(&img, &dir.join(name)).unwrap();
}

fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> serde_json::Value {
    json!([[x0, y0, x1, y0, x1, y1, x0, y1]])
}

#[test]
fn ingest_filters_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png", 80, 120);
    write_image(dir.path(), "b.png", 100, 100);
    let ann = json!({
        "images": [
            {"id": 1, "file_name": "a.png", "width": 120, "height": 80},
            {"id": 2, "file_name": "b.png", "width": 100, "height": 100}
        ],
        "categories": [{"id": 7, "name": "giraffe"}, {"id": 8, "name": "zebra"}],
        "annotations": [
            // kept: centred square
            {"id": 10, "image_id": 1, "category_id": 7, "segmentation": square(30.0, 20.0, 80.0, 60.0)},
            // kept: square given as uncompressed run lengths (column major)
            {"id": 11, "image_id": 2, "category_id": 7, "segmentation": {"size": [100, 100], "counts": rle_square(100, 30, 70)}},
            // crowd
            {"id": 12, "image_id": 2, "category_id": 7, "iscrowd": 1, "segmentation": square(20.0, 20.0, 60.0, 60.0)},
            // touches the border
            {"id": 13, "image_id": 1, "category_id": 7, "segmentation": square(0.0, 10.0, 40.0, 50.0)},
            // two separate pieces
            {"id": 14, "image_id": 2, "category_id": 7, "segmentation": [[10, 10, 30, 10, 30, 30, 10, 30], [60, 60, 90, 60, 90, 90, 60, 90]]},
            // under one percent of the image
            {"id": 15, "image_id": 2, "category_id": 7, "segmentation": square(50.0, 50.0, 53.0, 53.0)},
            // other class
            {"id": 16, "image_id": 2, "category_id": 8, "segmentation": square(20.0, 20.0, 60.0, 60.0)}
        ]
    });
    let file = dir.path().join("instances.json");
    std::fs::write(&file, ann.to_string()).unwrap();

    let (data, stats) = Dataset::from_coco(&file, dir.path(), "giraffe", 32).unwrap();
    assert_eq!(stats.seen, 6);
    assert_eq!((stats.kept, stats.crowd, stats.touches_border, stats.multiple_components, stats.too_small), (2, 1, 1, 1, 1));
    assert_eq!(data.len(), 2);
    for r in &data.records {
        assert_eq!((r.image.height(), r.image.width()), (32, 32));
        assert!(r.mask.is_binary());
        assert_eq!(tight_bbox(&r.mask).unwrap(), r.bbox);
    }

    // saved datasets load back with the same content hash
    let out = dir.path().join("saved");
    data.save(&out).unwrap();
    let back = Dataset::load(&out).unwrap();
    assert_eq!(back.content_hash(), data.content_hash());
    assert_eq!(back.records.len(), 2);

    assert!(Dataset::from_coco(&file, dir.path(), "okapi", 32).is_err());
}

fn rle_square(side: usize, lo: usize, hi: usize) -> Vec<u64> {
    let mut flat = Vec::with_capacity(side * side);
    for x in 0..side {
        for y in 0..side {
            flat.push((lo..hi).contains(&x) && (lo..hi).contains(&y));
        }
    }
    let mut counts = Vec::new();
    let (mut current, mut run) = (false, 0u64);
    for v in flat {
        if v == current {
            run += 1;
        } else {
            counts.push(run);
            current = v;
            run = 1;
        }
    }
    counts.push(run);
    counts
}
