//! 2x2 grid tiling of views and the joint multi-view sampler.

mod batch;
mod joint;
mod layout;
mod tile;

pub use batch::{known_padding, LatentBatch};
pub use joint::{independent_inpaint, joint_inpaint, planned_layouts, JointSampleConfig};
pub use layout::{permute_into_grids, reference_layouts, shuffled_reference_layouts, GridLayout};
pub use tile::{
    binarize_mask, downsample_quarter, grid_tile, grid_untile, tile4, tile4_mask, untile4, upsample_double,
};
