//! Exemplar-guided material assignment for segmented 3D meshes.
//!
//! The crate implements a batch pipeline that pairs segmented triangle
//! meshes with exemplar photographs and assigns a material from a tagged
//! library to every material part of every mesh:
//!
//! 1. **Ingest** — meshes are welded, normalized into the unit cube, and
//!    given scale-normalized UVs ([`shapelib`]); photos are masked, square
//!    cropped, and deduplicated ([`exemplar`]).
//! 2. **Coarse alignment** — every shape is rendered from a deterministic
//!    spherical viewpoint grid ([`camera`], [`raster`]) and matched against
//!    exemplars with HOG descriptors through a reverse index ([`hogindex`]).
//! 3. **Fine alignment** — the projected part map is warped onto the
//!    exemplar with a regularized discrete silhouette flow ([`flowrefine`])
//!    and snapped to image evidence with a dense CRF ([`densecrf`]).
//! 4. **Assignment** — per-pixel substance distributions are aggregated per
//!    part ([`substance`]) and materials are ranked by color signatures
//!    weighted by substance confidence ([`material`]).
//! 5. **Outputs** — PhotoShape descriptors, preview renders, and reports
//!    ([`pipeline`]); randomized scene descriptions for synthetic training
//!    data ([`synthgen`]).
//!
//! All operations are deterministic for a fixed seed and configuration.

pub mod camera;
pub mod densecrf;
pub mod exemplar;
pub mod flowrefine;
pub mod geom;
pub mod hogindex;
pub mod img;
pub mod material;
pub mod pipeline;
pub mod raster;
pub mod shapelib;
pub mod substance;
pub mod synthgen;

pub use camera::{SphericalPose, ViewpointGrid};
pub use raster::LabelMap;
pub use shapelib::SegmentedMesh;
