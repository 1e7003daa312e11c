//! Scenes, batching, highD ingestion, synthetic generation and archives.

mod archive;
mod batch;
mod highd;
mod scene;
mod synth;

pub use archive::{load_archive, save_archive, SceneArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use batch::{batches, Batch, Batches};
pub use highd::{
    build_scenes, decimation_factor, export_scene_highd, parse_highd, parse_highd_from, window_count, BuildConfig,
    BuildReport, RecordingMeta, TrackRow, TrackTable,
};
pub use scene::{Scene, LANE_FEATURES, VEHICLE_PROPS};
pub use synth::{
    lane_change_progress, lane_change_tau, synth_generate, synth_scenes, LaneChange, SynthConfig, SyntheticScene,
    LANE_CHANGE_DURATION, LANE_WIDTH,
};
