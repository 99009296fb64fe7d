//! Half-pixel bilinear resizing of a 2x2 map to 4x4 and of an affine ramp.

use hrseg::nn::resize_planes;

fn print(data: &[f64], w: usize) {
    for row in data.chunks(w) {
        println!("  {}", row.iter().map(|v| format!("{v:6.3}")).collect::<Vec<_>>().join(" "));
    }
}

fn main() {
    let small = [1.0, 2.0, 3.0, 4.0];
    println!("2x2 -> 4x4");
    print(&resize_planes(&small, 1, 2, 2, 4, 4), 4);

    let ramp: Vec<f64> = (0..4 * 4).map(|i| 0.5 * (i / 4) as f64 + 2.0 * (i % 4) as f64).collect();
    println!("ramp 4x4 -> 8x8, exact away from the border");
    print(&resize_planes(&ramp, 1, 4, 4, 8, 8), 8);
}
