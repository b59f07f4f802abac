//! Animal re-identification toolkit.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`maskpipe`]: segmentation-mask fusion and background blanking
//! - [`datacore`]: dataset manifests, identity-balanced sampling, augmentation
//! - [`nn`]: the CPU tensor kernels (conv / norm / linear) with explicit
//!   backward passes used by the model tower
//! - [`nettower`]: the re-ID network with its dense-descriptor branch
//! - [`losskit`]: the four training losses and the synthetic warp sampler
//! - [`trainer`]: optimizer groups, schedule and the epoch loop
//! - [`evalkit`]: retrieval ranking, mAP/R@k, protocols and re-ranking
//! - [`partviz`]: dense-descriptor match visualization
//! - [`synth`]: the bundled procedural toy dataset generator
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature (default) is enabled and plain sequential iteration
//! otherwise. Results are identical either way: parallel sections only ever
//! write disjoint outputs, and reductions are folded sequentially in index
//! order.

pub mod datacore;
pub mod evalkit;
pub mod losskit;
pub mod maskpipe;
pub mod nettower;
pub mod nn;
pub mod par;
pub mod partviz;
pub mod rng;
pub mod synth;
pub mod trainer;
