//! Reference generation: clothoid paths, projection, look-ahead PID and
//! drift equilibria.

pub mod equilibrium;
pub mod geometry;
pub mod pid;

pub use equilibrium::{solve_equilibrium, EquilibriumPoint, ReferenceGenerator, EQUILIBRIUM_TOL};
pub use geometry::{
    default_loop_segments, project_to_path, wrap_angle, ClothoidPath, PathSample, PathSpec,
    Segment, TrackingError, DEFAULT_PATH_NAME, OFF_PATH_LIMIT, SAMPLE_SPACING,
};
pub use pid::{LookaheadPid, PidConfig, PidOutput};
