//! Clustering-based subdomain alignment: correlation descriptors, online
//! k-means with silhouette model selection, cross-stage label voting and the
//! class-weighted MMD loss.

mod bank;
mod cluster;
mod descriptor;
mod lmmd;
mod vote;

pub use bank::{BankEntry, OnlineClusterer, RefitReport};
pub use cluster::{
    assign_labels, distance_matrix, fit_clusters, fit_k, kmeans, silhouette, silhouette_from_distances,
    ClusterModel, ClusterSearch, KMeans,
};
pub use descriptor::{correlation_descriptor, descriptor_from_buffers};
pub use lmmd::{kernel_matrix, lmmd_loss, lmmd_weights, median_bandwidth, mmd2, KernelConfig, LmmdOutput};
pub use vote::{align_permutation, align_stage_labels, vote, vote_labels};
