use std::path::Path;

use autoopt::data::{mnist_paths, write_idx, Dataset, Split};
use autoopt::Rng;

/// Writes a small MNIST-shaped IDX set: digit `k` lights up row band `k`.
pub fn write_fixture(dir: &Path, train: usize, test: usize) {
    let mut rng = Rng::new(31);
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 10;
            for r in 0..28 {
                for _ in 0..28 {
                    let base = if r / 3 == label { 180.0 } else { 20.0 };
                    pixels.push((base + 60.0 * rng.uniform()) as u8);
                }
            }
            labels.push(label);
        }
        let data = Dataset::from_raw(pixels, labels, [1, 28, 28], split).unwrap();
        let (images, labels) = mnist_paths(dir, split);
        write_idx(&images, &labels, &data).unwrap();
    }
}
