//! Scene data model, on-disk archives, synthetic scenes and stuff clustering.

mod archive;
mod cluster;
mod scene;
mod synth;

pub use archive::{load_scene, save_scene, ArraySpec, Manifest, MANIFEST};
pub use cluster::{
    cluster_stuff_instances, cluster_stuff_instances_with, ClusteringParams, RadiusGraphClusterer,
    StuffClusterer,
};
pub use scene::{DomainId, PerDomain, SceneSample, UNLABELED};
pub use synth::{
    default_extent, generate_corpus, generate_synthetic_scene, generate_synthetic_with_primitives,
    synthetic_class_names, CorpusConfig, Primitive, PrimitiveKind, SyntheticSceneConfig,
};
