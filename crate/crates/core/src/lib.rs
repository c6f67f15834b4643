pub mod cloud;
pub mod geometry;
pub mod init;
pub mod io;
pub mod joint;
pub mod lidar_pose;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod synth;
pub mod visual_ba;
