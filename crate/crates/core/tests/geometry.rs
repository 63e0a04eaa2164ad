mod common;

use common::{dense, footprint, measured_spans, positive_network, random_spec, random_tensor, rng};
use fcnn_core::evalbench::{interior_discrepancy, patch_scan, ScanPlan};
use fcnn_core::netspec::{receptive_field, DEFAULT_SPEC};
use fcnn_core::network::fc_as_conv;
use fcnn_core::tensor::conv2d_forward;
use fcnn_core::{init_network, parse_spec, Shape};
use rand::Rng;

#[test]
fn footprint_oracle_agrees_with_netspec_on_random_specs() {
    let mut r = rng(10);
    for case in 0..12 {
        let spec = random_spec(&mut r, 2);
        let g = receptive_field(&spec).unwrap();
        let size = (g.receptive_field() + 3 * g.output_stride()).next_multiple_of(4) + 8;
        let net = positive_network(&spec, case);
        let (rf, stride, first) = footprint(&net, 4, size, case);
        assert_eq!(rf, g.receptive_field(), "{spec}");
        assert_eq!(stride, g.output_stride(), "{spec}");
        assert_eq!(first, g.first_pixel(), "{spec}");
    }
}

#[test]
fn footprint_of_default_network() {
    let spec = parse_spec(DEFAULT_SPEC).unwrap();
    let net = positive_network(&spec, 3);
    assert_eq!(footprint(&net, 4, 96, 3), (54, 4, -25));
    let g = receptive_field(&spec).unwrap();
    for (o, span) in measured_spans(&net, 4, 96, 4).into_iter().enumerate() {
        let (lo, hi) = g.input_span(o);
        let clipped = (lo.max(0) as usize, hi.min(95) as usize);
        assert_eq!(span, Some(clipped), "cell {o}");
    }
}

#[test]
fn interior_cells_never_touch_padding() {
    let g = receptive_field(&parse_spec(DEFAULT_SPEC).unwrap()).unwrap();
    let spans = measured_spans(&positive_network(&parse_spec(DEFAULT_SPEC).unwrap(), 5), 4, 72, 5);
    for o in g.interior_cells(72) {
        let (lo, hi) = spans[o].unwrap();
        assert_eq!(hi - lo + 1, 54, "cell {o} is clipped");
    }
}

#[test]
fn shifting_input_by_output_stride_shifts_output_by_one_cell() {
    let mut r = rng(11);
    for case in 0..10 {
        let spec = random_spec(&mut r, 2).with_input_channels(2);
        let g = receptive_field(&spec).unwrap();
        let s = g.output_stride();
        let net = init_network(&spec, 100 + case).unwrap();
        let h = (g.receptive_field() + 2 * s).next_multiple_of(4);
        let w = h + 2 * s;
        let big = random_tensor(Shape::new(2, h, w + s), 0.0, 1.0, &mut r);
        let a = net.predict(&big.crop(0, 0, h, w).unwrap()).unwrap();
        let b = net.predict(&big.crop(0, s, h, w).unwrap()).unwrap();
        let rows = g.interior_cells(h);
        let cols = g.interior_cells(w);
        assert!(!rows.is_empty() && cols.len() >= 2, "{spec}");
        for y in rows {
            for x in cols.start..cols.end - 1 {
                assert_eq!(b.get(0, y, x), a.get(0, y, x + 1), "{spec} at ({y},{x})");
            }
        }
    }
}

#[test]
fn fully_connected_layer_equals_whole_extent_convolution() {
    let mut r = rng(12);
    for _ in 0..100 {
        let extent = r.gen_range(1..=5);
        let shape = Shape::new(r.gen_range(1..=4), extent, extent);
        let rows = r.gen_range(1..=6);
        let weights: Vec<f64> = (0..rows * shape.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..rows).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = random_tensor(shape, -1.0, 1.0, &mut r);
        let conv = fc_as_conv(&weights, &bias, shape).unwrap();
        let y = conv2d_forward(&x, &conv).unwrap();
        assert_eq!(y.shape(), Shape::new(rows, 1, 1));
        for (a, b) in y.data().iter().zip(dense(&weights, &bias, x.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_scan_at_the_exact_patch_matches_full_frame() {
    let mut r = rng(13);
    for case in 0..4 {
        let spec = random_spec(&mut r, 2);
        let g = receptive_field(&spec).unwrap();
        let (patch, _) = g.exact_scan_patch();
        let plan = ScanPlan::new(&g, patch, g.output_stride()).unwrap();
        assert!(plan.is_exact(&g), "{spec}");
        let net = init_network(&spec, 200 + case).unwrap();
        let size = (patch + 2 * g.output_stride()).next_multiple_of(4);
        let image = random_tensor(Shape::new(1, size, size), 0.0, 1.0, &mut r);
        let full = net.predict(&image).unwrap();
        let scan = patch_scan(&net, &image, patch, g.output_stride()).unwrap();
        assert_eq!(interior_discrepancy(&g, &full, &scan, size, size).unwrap(), 0.0, "{spec}");
    }
}

#[test]
fn default_geometry_needs_a_sixty_pixel_patch() {
    let g = receptive_field(&parse_spec(DEFAULT_SPEC).unwrap()).unwrap();
    assert_eq!(g.exact_scan_patch(), (60, 7));
    assert!(!ScanPlan::new(&g, 56, 4).unwrap().is_exact(&g));
    assert!(ScanPlan::new(&g, 60, 4).unwrap().is_exact(&g));
}
