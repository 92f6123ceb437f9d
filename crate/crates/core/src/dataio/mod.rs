//! Loaders, writers and synthetic generators.

pub mod events;
pub mod manifest;
pub mod pointfile;
pub mod shapes;

pub use events::{
    clip_dataset, gen_gestures, gesture_stream, load_events, save_events, stream_accuracy, stream_predictions, system_prediction, window_events, ClipSpec, EventRecord,
    Gesture, GestureSpec,
};
pub use manifest::{load_dataset, save_dataset};
pub use pointfile::{load_point_cloud, save_point_cloud};
pub use shapes::{dataset_hash, gen_scene, gen_shapes, shape_cloud, Shape, ShapeSpec};
