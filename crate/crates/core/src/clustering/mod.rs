//! Unsupervised tree discovery: PCA, full-covariance Gaussian mixtures,
//! domain assignment with pruning, symmetrised KL distances and
//! average-linkage agglomeration.

mod agglo;
mod assign;
mod embedfile;
mod gmm;
mod kl;
pub mod linalg;
mod pca;
mod pipeline;

pub use crate::domtree::MergeStep;
pub use agglo::{agglomerate, DistanceMatrix};
pub use assign::{assign_and_prune, Assignment};
pub use embedfile::EmbeddingMatrix;
pub use gmm::{gmm_fit, log_sum_exp, normalize_log, responsibilities, GaussianComponent, GmmConfig, GmmModel};
pub use kl::{kl_gauss, sym_kl};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use pipeline::{attach_clusters, fit_router, discover_tree, embed_documents, embed_domains, Discovery, DiscoveryConfig};
