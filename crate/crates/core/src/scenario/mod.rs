//! Scene data model, ego-frame preprocessing, synthetic lots and scene files.

mod io;
mod preprocess;
pub mod synth;
mod types;

pub use io::{load_scenes, read_scenes, save_scenes, write_scenes, SCENE_FORMAT, SCENE_FORMAT_VERSION};
pub use preprocess::{
    build_samples, compute_features, ego_transform, DatasetConfig, EgoSample, SampleConfig,
};
pub use synth::{synth_generate, LotLayout, SynthConfig};
pub use types::{
    resample_polyline, wrap_angle, AgentState, AgentTrack, AgentType, Polyline, PolylineKind,
    Scene, SceneMap, AGENT_FEATURES, DT, MAP_FEATURES, POLYLINE_POINTS, POLYLINE_TYPES,
};
