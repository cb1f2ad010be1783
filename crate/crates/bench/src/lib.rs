//! Fixtures shared by the kernel benchmarks.

use pnnl_core::dataset::{split, standardize_fit_apply};
use pnnl_core::synthetic::{gaussian_blobs, BlobSpec};
use pnnl_core::{DataSplit, Dataset, Matrix, RngState, Topology};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Standardized blob data with the default 80/10/10 split.
pub fn blob_data(samples: usize, dim: usize, classes: usize) -> (Dataset, DataSplit) {
    let raw = gaussian_blobs(&BlobSpec {
        samples,
        dim,
        classes,
        ..BlobSpec::default()
    })
    .expect("valid blob spec");
    let sp = split(&raw, (0.8, 0.1, 0.1), 0).expect("enough samples");
    let (ds, _) = standardize_fit_apply(&raw, &sp).expect("standardize");
    (ds, sp)
}

/// `layers` layers of `blocks` frozen blocks each, then one trainable block.
pub fn grown_topology(dim: usize, classes: usize, width: usize, layers: usize, blocks: usize) -> Topology {
    let mut rng = RngState::new(11);
    let mut topo = Topology::new(dim, classes);
    for _ in 0..layers {
        topo.freeze_all();
        topo.start_new_layer(width, &mut rng).expect("layer");
        for _ in 1..blocks {
            topo.freeze_all();
            let d_in = topo.layers.last().expect("layer").d_in();
            topo.add_block(d_in, width, &mut rng).expect("block");
        }
    }
    topo
}
