//! EMG records, windowing, views, file formats, synthetic users and
//! cross-user splits.

pub mod io;
mod record;
mod split;
pub mod synth;
mod views;

pub use io::{load_records, save_records, DataStore, Format};
pub use record::{
    segment_all, segment_windows, ChannelStats, EmgRecord, Window, WindowOrigin, WindowedSample,
};
pub use split::{make_cross_user_splits, UserSplit};
pub use synth::{synth_generate, SynthConfig, SynthDataset, SyntheticUserProfile};
pub use views::{random_mask_view, reverse_view};
