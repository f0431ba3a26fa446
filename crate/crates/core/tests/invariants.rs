use ndarray::{Array2, Array3};
use proptest::prelude::*;
use stampgen::dataset::{filter_instances, tight_bbox, InstanceRecord};
use stampgen::domain::rasterize_bbox;
use stampgen::evaluation::{kid, mean_pairwise_l1, nn_mask_retrieve};
use stampgen::pipeline::alpha_grid;
use stampgen::{ImageTensor, LatentVector, MaskTensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> MaskTensor {
    MaskTensor::new(Array2::from_shape_fn((h, w), |(y, x)| ((y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x)) as u8 as f32)).unwrap()
}

fn upscale(m: &MaskTensor, k: usize) -> MaskTensor {
    let d = m.data();
    MaskTensor::new(Array2::from_shape_fn((d.nrows() * k, d.ncols() * k), |(y, x)| d[[y / k, x / k]])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kid_is_symmetric((x, y) in (2usize..8, 2usize..8, 1usize..6).prop_flat_map(|(m, n, d)| (matrix(m, d), matrix(n, d)))) {
        let a = kid(x.view(), y.view()).unwrap();
        let b = kid(y.view(), x.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn pairwise_l1_is_zero_only_for_repeats(row in prop::collection::vec(-1.0f64..1.0, 4), n in 2usize..6) {
        let same = Array2::from_shape_fn((n, 4), |(_, j)| row[j]);
        prop_assert_eq!(mean_pairwise_l1(same.view()), 0.0);
        let mut moved = same.clone();
        moved[[0, 0]] += 0.5;
        prop_assert!(mean_pairwise_l1(moved.view()) > 0.0);
    }

    #[test]
    fn alpha_grid_is_uniform_and_closed(k in 2usize..80) {
        let g = alpha_grid(k).unwrap();
        prop_assert_eq!(g.len(), k);
        prop_assert_eq!(g[0], 0.0);
        prop_assert_eq!(g[k - 1], 1.0);
        prop_assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lerp_stays_between_endpoints(a in prop::collection::vec(-4.0f32..4.0, 5), b in prop::collection::vec(-4.0f32..4.0, 5), t in 0.0f32..=1.0) {
        let (za, zb) = (LatentVector::new(a.clone()).unwrap(), LatentVector::new(b.clone()).unwrap());
        prop_assert_eq!(za.lerp(&zb, 0.0).unwrap(), za.clone());
        prop_assert_eq!(za.lerp(&zb, 1.0).unwrap(), zb.clone());
        let z = za.lerp(&zb, t).unwrap();
        for ((v, lo), hi) in z.values().iter().zip(&a).zip(&b) {
            prop_assert!(*v >= lo.min(*hi) - 1e-6 && *v <= lo.max(*hi) + 1e-6);
        }
    }

    #[test]
    fn larger_boxes_cover_smaller_ones(x0 in 0.0f32..0.4, y0 in 0.0f32..0.4, w in 0.05f32..0.5, h in 0.05f32..0.5, grow in 0.0f32..0.1, side in 4usize..40) {
        let inner = rasterize_bbox([x0, y0, x0 + w, y0 + h], side, side).unwrap();
        let outer = rasterize_bbox([(x0 - grow).max(0.0), (y0 - grow).max(0.0), (x0 + w + grow).min(1.0), (y0 + h + grow).min(1.0)], side, side).unwrap();
        prop_assert!(inner.data().iter().zip(outer.data().iter()).all(|(a, b)| *a <= *b));
        prop_assert!(inner.count_nonzero() > 0);
    }

    #[test]
    fn retained_records_have_covering_boxes(y0 in 1usize..10, x0 in 1usize..10, rh in 1usize..12, rw in 1usize..12, hole in any::<bool>()) {
        let side = 24;
        let mut m = rect(side, side, y0, x0, rh, rw).data().clone();
        if hole && rh > 2 && rw > 2 {
            m[[y0 + 1, x0 + 1]] = 0.0;
        }
        let mask = MaskTensor::new(m).unwrap();
        let image = ImageTensor::new(Array3::zeros((side, side, 3))).unwrap();
        let rec = InstanceRecord::new("r", "c", image, mask.clone()).unwrap();
        let kept = filter_instances(vec![rec.clone()]);
        prop_assert_eq!(filter_instances(kept.clone()).len(), kept.len());
        for r in &kept {
            let raster = r.bbox.raster();
            prop_assert!(r.mask.data().iter().zip(raster.data().iter()).all(|(m, b)| *m == 0.0 || *b == 1.0));
            prop_assert_eq!(&tight_bbox(&r.mask).unwrap(), &r.bbox);
        }
    }

    #[test]
    fn retrieval_ignores_uniform_scale(pick in 0usize..4, k in 2usize..4) {
        let corpus = vec![
            rect(32, 32, 4, 4, 20, 20),
            rect(32, 32, 10, 2, 6, 28),
            rect(32, 32, 2, 12, 28, 6),
            MaskTensor::new(Array2::from_shape_fn((32, 32), |(y, x)| (x >= 4 && y >= 4 && x + y <= 40 && x < 28 && y < 28) as u8 as f32)).unwrap(),
        ];
        let query = corpus[pick].clone();
        let base = nn_mask_retrieve(&query, &corpus).unwrap();
        prop_assert_eq!(base, pick);
        prop_assert_eq!(nn_mask_retrieve(&upscale(&query, k), &corpus).unwrap(), base);
    }
}
